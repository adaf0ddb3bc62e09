"""
Seed-latent sequence generation.

A variational head maps pooled embeddings of a frozen encoder to
(mu, logvar). An autoregressive decoder is conditioned on a latent through a
single projected prefix vector at position 0, followed by [CLS] and the
residues. Seeds are encoded deterministically (sample == mu) and Gaussian
noise of scale sigma is added to explore around them.

Decoder parameter names:

    latent.{w,b}           (z_dim, d), (d,)
    tok_emb, pos_emb       (30, d), (max_len, d)
    layers.<i>.*           causal pre-LN blocks, as in the encoder
    final_ln.{g,b}, out.{w,b}

Variational head parameters: vae.mu.{w,b} and vae.logvar.{w,b}.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from plm_kit import layers
from plm_kit import tensor as T
from plm_kit.config import DecoderConfig, GenerationConfig, OptimizerConfig, VaeTrainConfig
from plm_kit.data_io import FastaRecord, save_fasta
from plm_kit.encoder import EncoderModel, embed_sequences
from plm_kit.errors import EmptyDataError, ShapeError, UntrainedDecoderError
from plm_kit.layers import Params
from plm_kit.metrics import sequence_identity
from plm_kit.optim import AdamHyper, AdamState, adam_step
from plm_kit.tensor import IGNORE_INDEX, Tensor
from plm_kit.tokenizer import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    VOCAB,
    decode,
    encode_many,
)
from plm_kit.training import TrainRunReport, check_finite

LOGVAR_MIN = -20.0
LOGVAR_MAX = 4.0

SeedLike = Union[int, Sequence[int]]
EventFn = Callable[..., None]


def _noop(*args, **kwargs) -> None:
    pass


# ── Latents ───────────────────────────────────────────────


@dataclass(frozen=True)
class LatentVector:
    """sample == mu + exp(logvar / 2) * eps + noise."""
    mu: np.ndarray
    logvar: np.ndarray
    sample: np.ndarray
    eps: np.ndarray
    noise: Optional[np.ndarray] = None

    @property
    def z_dim(self) -> int:
        return int(self.mu.shape[0])


@dataclass
class VariationalHead:
    input_dim: int
    z_dim: int
    params: Params = field(default_factory=dict)


def init_variational_head(input_dim: int, z_dim: int, seed: int = 0) -> VariationalHead:
    head = VariationalHead(input_dim=input_dim, z_dim=z_dim)
    rng = np.random.default_rng([seed, 7])
    layers.init_linear(rng, head.params, "vae.mu", input_dim, z_dim)
    layers.init_linear(rng, head.params, "vae.logvar", input_dim, z_dim)
    return head


def latent_forward(head: VariationalHead, pooled: Tensor) -> tuple[Tensor, Tensor]:
    """(mu, clamped logvar) for pooled embeddings (B, d)."""
    if pooled.ndim != 2 or pooled.shape[1] != head.input_dim:
        raise ShapeError(f"expected pooled embeddings (B, {head.input_dim}), got {pooled.shape}")
    mu = layers.apply_linear(head.params, "vae.mu", pooled)
    logvar = T.clamp(layers.apply_linear(head.params, "vae.logvar", pooled), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def encode_latent(
    encoder: EncoderModel,
    head: VariationalHead,
    sequence: str,
    noise_on: bool = False,
    seed: SeedLike = 0,
) -> LatentVector:
    """Latent for one sequence; without noise the sample is exactly mu."""
    pooled = embed_sequences(encoder, [sequence])
    with T.no_grad():
        mu_t, logvar_t = latent_forward(head, Tensor(pooled))
    mu = mu_t.data[0].astype(np.float64)
    logvar = logvar_t.data[0].astype(np.float64)
    if noise_on:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
        sample = mu + np.exp(logvar / 2.0) * eps
    else:
        eps = np.zeros_like(mu)
        sample = mu.copy()
    return LatentVector(mu=mu, logvar=logvar, sample=sample, eps=eps)


def perturb(z: LatentVector, sigma: float, seed: SeedLike = 0) -> LatentVector:
    """Add N(0, sigma^2 I) to the sample; mu and logvar are carried for provenance."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return z
    noise = sigma * np.random.default_rng(seed).standard_normal(z.sample.shape)
    total = noise if z.noise is None else z.noise + noise
    return LatentVector(mu=z.mu, logvar=z.logvar, sample=z.sample + noise, eps=z.eps, noise=total)


def interpolate(z0: LatentVector, z1: LatentVector, steps: int) -> list[LatentVector]:
    """``steps`` evenly spaced deterministic latents from z0 to z1, endpoints included."""
    if z0.z_dim != z1.z_dim:
        raise ShapeError(f"cannot interpolate latents of size {z0.z_dim} and {z1.z_dim}")
    if steps < 2:
        raise ValueError("interpolate needs at least 2 steps")
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        sample = (1.0 - t) * z0.sample + t * z1.sample
        logvar = (1.0 - t) * z0.logvar + t * z1.logvar
        eps = np.zeros_like(sample)
        out.append(LatentVector(mu=sample, logvar=logvar, sample=sample.copy(), eps=eps))
    return out


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    per_item = T.exp(logvar) + mu * mu - 1.0 - logvar
    return T.sum_(per_item) * (0.5 / mu.shape[0])


def kl_closed_form(mu, logvar) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar))


# ── Decoder ───────────────────────────────────────────────


@dataclass
class DecoderModel:
    config: DecoderConfig
    params: Params
    trained: bool = False

    def parameters(self) -> Params:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class LatentGenerator:
    """Variational head plus decoder; the unit stored in a decoder checkpoint."""
    head: VariationalHead
    decoder: DecoderModel

    def parameters(self) -> Params:
        return {**self.head.params, **self.decoder.params}


def decoder_param_count(config: DecoderConfig) -> int:
    d, v = config.hidden_dim, len(VOCAB)
    return (
        config.z_dim * d
        + d
        + v * d
        + config.max_len * d
        + config.num_layers * layers.block_param_count(d, config.ffn_dim)
        + 2 * d
        + d * v
        + v
    )


def init_decoder(config: DecoderConfig) -> DecoderModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.hidden_dim
    params: Params = {}
    layers.init_linear(rng, params, "latent", config.z_dim, d)
    params["tok_emb"] = layers.param(layers.trunc_normal(rng, (len(VOCAB), d)))
    params["pos_emb"] = layers.param(layers.trunc_normal(rng, (config.max_len, d)))
    for i in range(config.num_layers):
        layers.init_block(rng, params, f"layers.{i}", d, config.ffn_dim)
    layers.init_layer_norm(params, "final_ln", d)
    layers.init_linear(rng, params, "out", d, len(VOCAB))
    return DecoderModel(config=config, params=params)


def init_generator(encoder_dim: int, config: DecoderConfig) -> LatentGenerator:
    return LatentGenerator(
        head=init_variational_head(encoder_dim, config.z_dim, config.seed),
        decoder=init_decoder(config),
    )


def decoder_logits(
    decoder: DecoderModel,
    z: Tensor,
    ids: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Teacher-forced logits (B, L, 30); position t sees the prefix and ids[:, :t]."""
    cfg = decoder.config
    ids = np.asarray(ids)
    if ids.ndim != 2 or z.ndim != 2 or z.shape != (ids.shape[0], cfg.z_dim):
        raise ShapeError(f"latents {z.shape} do not match ids {ids.shape} and z_dim {cfg.z_dim}")
    batch, length = ids.shape
    if length > cfg.max_len:
        raise ShapeError(f"sequence length {length} exceeds decoder max_len {cfg.max_len}")

    prefix = T.reshape(layers.apply_linear(decoder.params, "latent", z), (batch, 1, cfg.hidden_dim))
    inputs = ids[:, :-1]
    parts = [prefix]
    if inputs.shape[1]:
        parts.append(T.embedding(decoder.params["tok_emb"], inputs))
    x = layers.add_positions(T.concat(parts, axis=1), decoder.params["pos_emb"])

    key_valid = np.concatenate([np.ones((batch, 1), dtype=bool), inputs != PAD_ID], axis=1)
    blocked = layers.attention_mask(key_valid, cfg.num_heads, causal=True)
    x = T.dropout(x, cfg.dropout_rate, rng, train_mode)
    for i in range(cfg.num_layers):
        x = layers.block_forward(
            decoder.params,
            f"layers.{i}",
            x,
            blocked,
            cfg.num_heads,
            cfg.dropout_rate,
            rng,
            train_mode,
        )
    x = layers.apply_layer_norm(decoder.params, "final_ln", x)
    return layers.apply_linear(decoder.params, "out", x)


def reconstruction_loss(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Cross-entropy of positions 1.. against ids[:, 1:], padding ignored."""
    batch, length = ids.shape
    targets = np.where(ids[:, 1:] == PAD_ID, IGNORE_INDEX, ids[:, 1:])
    shifted = T.narrow(logits, 1, 1, length - 1)
    return T.cross_entropy(T.reshape(shifted, (-1, logits.shape[-1])), targets.reshape(-1))


# ── Generation ────────────────────────────────────────────

_NEVER_EMIT = np.array([PAD_ID, UNK_ID, CLS_ID, MASK_ID])


def generate_many(
    decoder: DecoderModel,
    latents: Sequence[LatentVector],
    gen: GenerationConfig,
    seeds: Optional[Sequence[SeedLike]] = None,
) -> list[str]:
    """Decode one sequence per latent, batched.

    Each row stops at [SEP]; [SEP] is disallowed as the first residue and
    forced at the last position, so outputs hold 1..max_len-2 residues
    (none when max_len < 3).
    Temperature sampling draws row i from ``default_rng(seeds[i])``.
    """
    if not decoder.trained and not gen.allow_untrained:
        raise UntrainedDecoderError(
            "decoder has not been trained; train it first or set generation.allow_untrained"
        )
    if not latents:
        return []
    max_len = min(gen.max_len, decoder.config.max_len)
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    if max_len < 3:
        # no room between [CLS] and [SEP]
        return [""] * len(latents)
    greedy = gen.sampling == "greedy"

    z_all = np.stack([lat.sample for lat in latents])
    if greedy:
        # greedy decoding is a function of z alone: decode each distinct latent once
        unique, inverse = np.unique(z_all, axis=0, return_inverse=True)
        decoded = _decode_rows(decoder, unique, max_len, gen, rngs=None)
        return [decoded[i] for i in np.asarray(inverse).reshape(-1)]

    if seeds is None:
        seeds = [[gen.seed, i] for i in range(len(latents))]
    if len(seeds) != len(latents):
        raise ValueError("need one seed per latent")
    rngs = [np.random.default_rng(s) for s in seeds]
    return _decode_rows(decoder, z_all, max_len, gen, rngs)


def _decode_rows(
    decoder: DecoderModel,
    z_all: np.ndarray,
    max_len: int,
    gen: GenerationConfig,
    rngs: Optional[list[np.random.Generator]],
) -> list[str]:
    batch = z_all.shape[0]
    ids = np.full((batch, max_len), PAD_ID, dtype=np.int64)
    ids[:, 0] = CLS_ID
    finished = np.zeros(batch, dtype=bool)
    z = Tensor(z_all)

    with T.no_grad():
        for t in range(1, max_len):
            logits = decoder_logits(decoder, z, ids[:, : t + 1]).data[:, t, :].astype(np.float64)
            logits[:, _NEVER_EMIT] = -np.inf
            if t == 1:
                logits[:, SEP_ID] = -np.inf
            if t == max_len - 1:
                logits[:, :] = -np.inf
                logits[:, SEP_ID] = 0.0
            for row in np.nonzero(~finished)[0]:
                if rngs is None:
                    token = int(np.argmax(logits[row]))
                else:
                    scaled = logits[row] / gen.temperature
                    probs = np.exp(scaled - scaled.max())
                    probs /= probs.sum()
                    token = int(rngs[row].choice(len(probs), p=probs))
                ids[row, t] = token
                if token == SEP_ID:
                    finished[row] = True
            if finished.all():
                break
    return [decode(row) for row in ids]


def generate(decoder: DecoderModel, z: LatentVector, gen: GenerationConfig) -> str:
    return generate_many(decoder, [z], gen, seeds=[gen.seed])[0]


# ── VAE training ──────────────────────────────────────────


def train_vae(
    encoder: EncoderModel,
    generator: LatentGenerator,
    corpus: Sequence[str],
    cfg: VaeTrainConfig,
    optimizer: Optional[OptimizerConfig] = None,
    seed: int = 0,
    on_event: Optional[EventFn] = None,
    log_every: int = 50,
) -> TrainRunReport:
    """Reconstruction cross-entropy plus beta * KL with a linear beta warm-up.

    The encoder only supplies pooled embeddings computed once up front, so
    its parameters are never touched.
    """
    on_event = on_event or _noop
    optimizer = optimizer or OptimizerConfig()
    corpus = list(corpus)[: cfg.corpus_cap]
    if not corpus:
        raise EmptyDataError("VAE training corpus is empty")
    decoder, head = generator.decoder, generator.head
    if head.input_dim != encoder.config.hidden_dim:
        raise ShapeError(
            f"variational head expects {head.input_dim}-d embeddings, "
            f"encoder produces {encoder.config.hidden_dim}"
        )

    pooled = embed_sequences(encoder, corpus, batch_size=max(cfg.batch_size, 32))
    batches_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    steps = cfg.epochs * batches_per_epoch
    warmup = math.ceil(cfg.warmup_fraction * steps)

    params = generator.parameters()
    hyper = AdamHyper(lr=cfg.lr, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)
    state = AdamState.create(params, hyper)
    rng = np.random.default_rng([seed, decoder.config.seed, 3])

    report = TrainRunReport(
        stage="vae",
        seed=seed,
        config={"vae": vars(cfg).copy(), "decoder": vars(decoder.config).copy()},
        components={"reconstruction": [], "kl": [], "beta": []},
    )
    on_event("vae_start", steps=steps, corpus_size=len(corpus), warmup_steps=warmup)
    started = time.perf_counter()

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), cfg.batch_size):
            step += 1
            rows = order[start : start + cfg.batch_size]
            tokens = encode_many([corpus[i] for i in rows], decoder.config.max_len)
            beta = cfg.kl_weight * min(1.0, step / warmup) if warmup else cfg.kl_weight

            mu, logvar = latent_forward(head, Tensor(pooled[rows]))
            eps = Tensor(rng.standard_normal(mu.shape))
            z = mu + T.exp(logvar * 0.5) * eps
            logits = decoder_logits(decoder, z, tokens.ids, True, rng)
            recon = reconstruction_loss(logits, tokens.ids)
            kl = kl_divergence(mu, logvar)
            loss = recon + kl * beta
            value = check_finite(loss, "vae", step)

            T.zero_grad(params.values())
            T.backward(loss)
            adam_step(params, state)

            report.losses.append(value)
            report.components["reconstruction"].append(recon.item())
            report.components["kl"].append(kl.item())
            report.components["beta"].append(beta)
            if step % log_every == 0 or step == steps:
                on_event(
                    "step",
                    stage="vae",
                    step=step,
                    total=steps,
                    loss=value,
                    reconstruction=recon.item(),
                    kl=kl.item(),
                    beta=beta,
                )

    T.zero_grad(params.values())
    if steps:
        decoder.trained = True
    report.wall_clock_s = time.perf_counter() - started
    on_event("vae_done", report=report)
    return report


# ── Seed campaigns ────────────────────────────────────────


@dataclass(frozen=True)
class GenerationRow:
    seed_id: str
    sigma: float
    sample_idx: int
    sequence: str
    identity: float

    @property
    def length(self) -> int:
        return len(self.sequence)


CSV_COLUMNS = ("seed_id", "sigma", "sample_idx", "length", "identity")


@dataclass
class GenerationReport:
    rows: list[GenerationRow]
    sigma_grid: list[float]
    n_per_sigma: int
    config: dict = field(default_factory=dict)
    seed: int = 0

    def summary(self) -> list[dict]:
        """Mean identity-to-seed and its standard error per sigma."""
        out = []
        for sigma in self.sigma_grid:
            values = np.array([r.identity for r in self.rows if r.sigma == sigma])
            lengths = np.array([r.length for r in self.rows if r.sigma == sigma])
            stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
            out.append({
                "sigma": sigma,
                "n": int(len(values)),
                "mean_identity": float(values.mean()) if len(values) else 0.0,
                "std_error": stderr,
                "mean_length": float(lengths.mean()) if len(lengths) else 0.0,
            })
        return out

    def fasta_records(self) -> list[FastaRecord]:
        return [
            FastaRecord(
                f"gen_{k} seed={r.seed_id} sigma={r.sigma:g} idx={r.sample_idx}", r.sequence
            )
            for k, r in enumerate(self.rows)
        ]

    def write(self, prefix: Union[str, Path]) -> dict[str, Path]:
        prefix = str(prefix)
        paths = {
            "fasta": Path(prefix + ".fasta"),
            "csv": Path(prefix + ".csv"),
            "summary": Path(prefix + ".summary.json"),
        }
        save_fasta(self.fasta_records(), paths["fasta"])
        with open(paths["csv"], "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow(
                    [r.seed_id, f"{r.sigma:g}", r.sample_idx, r.length, f"{r.identity:.6f}"]
                )
        summary = {"seed": self.seed, "n_per_sigma": self.n_per_sigma, "sigmas": self.summary()}
        text = json.dumps(summary, indent=2, sort_keys=True)
        paths["summary"].write_text(text + "\n", encoding="utf-8")
        return paths


def _identity(sample: str, reference: str) -> float:
    # an empty sample shares nothing with its seed
    return sequence_identity(sample, reference) if sample else 0.0


def seed_generation_campaign(
    encoder: EncoderModel,
    generator: LatentGenerator,
    seeds: Sequence[FastaRecord],
    sigma_grid: Sequence[float],
    n_per_sigma: int,
    gen: GenerationConfig,
    seed: int = 0,
    on_event: Optional[EventFn] = None,
) -> GenerationReport:
    """Generate ``n_per_sigma`` variants per seed and noise level.

    Each variant is scored by identity to its (truncated) seed.
    """
    on_event = on_event or _noop
    if not seeds:
        raise EmptyDataError("campaign needs at least one seed sequence")
    if n_per_sigma <= 0:
        raise ValueError("n_per_sigma must be positive")
    if any(s < 0 for s in sigma_grid):
        raise ValueError("sigma values must be non-negative")

    rows: list[GenerationRow] = []
    for i, record in enumerate(seeds):
        seed_id = record.header.split()[0] if record.header.strip() else f"seed{i}"
        on_event("campaign_seed", seed_id=seed_id, index=i + 1, total=len(seeds))
        base = encode_latent(encoder, generator.head, record.sequence, noise_on=False)
        reference = decode(encode_many([record.sequence], generator.decoder.config.max_len).ids[0])
        for j, sigma in enumerate(sigma_grid):
            latents = [perturb(base, sigma, seed=[seed, i, j, k, 0]) for k in range(n_per_sigma)]
            samples = generate_many(
                generator.decoder,
                latents,
                gen,
                seeds=[[seed, i, j, k, 1] for k in range(n_per_sigma)],
            )
            batch_rows = [
                GenerationRow(seed_id, float(sigma), k, s, _identity(s, reference))
                for k, s in enumerate(samples)
            ]
            rows.extend(batch_rows)
            on_event(
                "campaign_sigma",
                seed_id=seed_id,
                sigma=float(sigma),
                mean_identity=float(np.mean([r.identity for r in batch_rows])),
            )
    return GenerationReport(
        rows=rows,
        sigma_grid=[float(s) for s in sigma_grid],
        n_per_sigma=n_per_sigma,
        config={"generation": vars(gen).copy(), "decoder": vars(generator.decoder.config).copy()},
        seed=seed,
    )
