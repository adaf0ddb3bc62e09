"""Tests for latents, the conditioned decoder, VAE training and seed campaigns."""

import numpy as np
import pytest

from plm_kit import tensor as T
from plm_kit.config import DecoderConfig, EncoderConfig, GenerationConfig, VaeTrainConfig
from plm_kit.data_io import FastaRecord
from plm_kit.encoder import init_encoder
from plm_kit.errors import EmptyDataError, ShapeError, UntrainedDecoderError
from plm_kit.generative import (
    LOGVAR_MIN,
    LatentVector,
    decoder_logits,
    decoder_param_count,
    encode_latent,
    generate,
    generate_many,
    init_decoder,
    init_generator,
    init_variational_head,
    interpolate,
    kl_closed_form,
    kl_divergence,
    perturb,
    seed_generation_campaign,
    train_vae,
)
from plm_kit.metrics import sequence_identity
from plm_kit.synthetic import protein_corpus
from plm_kit.tensor import Tensor
from plm_kit.tokenizer import encode_many


def _latent(values):
    mu = np.asarray(values, dtype=np.float64)
    return LatentVector(mu=mu, logvar=np.zeros_like(mu), sample=mu.copy(), eps=np.zeros_like(mu))


UNTRAINED = GenerationConfig(max_len=12, allow_untrained=True)


# ── Latents ───────────────────────────────────────────────


class TestLatents:
    def test_perturb_zero_is_identity(self):
        z = _latent([0.5, -1.0])
        assert perturb(z, 0.0) is z

    def test_perturb_adds_seeded_noise(self):
        z = _latent(np.zeros(64))
        a = perturb(z, 2.0, seed=3)
        b = perturb(z, 2.0, seed=3)
        np.testing.assert_array_equal(a.sample, b.sample)
        np.testing.assert_array_equal(a.mu, z.mu)
        np.testing.assert_array_equal(a.noise, a.sample)
        assert a.sample.std() == pytest.approx(2.0, rel=0.3)

    def test_perturb_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            perturb(_latent([0.0]), -0.1)

    def test_interpolate_endpoints(self):
        z0, z1 = _latent([0.0, 0.0]), _latent([1.0, 2.0])
        path = interpolate(z0, z1, 5)
        assert len(path) == 5
        np.testing.assert_allclose(path[0].sample, z0.sample)
        np.testing.assert_allclose(path[-1].sample, z1.sample)
        np.testing.assert_allclose(path[2].sample, [0.5, 1.0])

    def test_interpolate_errors(self):
        with pytest.raises(ShapeError):
            interpolate(_latent([0.0]), _latent([0.0, 1.0]), 3)
        with pytest.raises(ValueError):
            interpolate(_latent([0.0]), _latent([1.0]), 1)

    def test_kl_closed_form(self):
        assert kl_closed_form([0.0, 0.0], [0.0, 0.0]) == 0.0
        assert kl_closed_form([1.0], [0.0]) == pytest.approx(0.5)
        assert kl_closed_form([0.0], [np.log(2.0)]) == pytest.approx(0.5 * (1.0 - np.log(2.0)))

    def test_kl_tensor_matches_closed_form(self, rng):
        mu = rng.normal(size=(3, 4))
        logvar = rng.normal(size=(3, 4)) * 0.5
        with T.precision(np.float64):
            value = kl_divergence(Tensor(mu), Tensor(logvar)).item()
        expected = np.mean([kl_closed_form(mu[i], logvar[i]) for i in range(3)])
        assert value == pytest.approx(expected, rel=1e-10)

    def test_encode_latent_without_noise_is_mu(self, tiny_encoder):
        head = init_generator(16, DecoderConfig(z_dim=8, hidden_dim=16, num_heads=2)).head
        z = encode_latent(tiny_encoder, head, "MKVLAAG")
        np.testing.assert_array_equal(z.sample, z.mu)
        assert z.z_dim == 8

    def test_encode_latent_with_noise_is_seeded(self, tiny_encoder):
        head = init_generator(16, DecoderConfig(z_dim=8, hidden_dim=16, num_heads=2)).head
        a = encode_latent(tiny_encoder, head, "MKVLAAG", noise_on=True, seed=4)
        b = encode_latent(tiny_encoder, head, "MKVLAAG", noise_on=True, seed=4)
        np.testing.assert_array_equal(a.sample, b.sample)
        assert not np.array_equal(a.sample, a.mu)

    def test_perturb_noise_moments(self):
        base = _latent(np.full(8, 3.0))
        noise = np.stack([perturb(base, 1.5, seed=i).sample - 3.0 for i in range(10_000)])
        assert abs(noise.mean()) < 0.04
        assert noise.var() == pytest.approx(1.5**2, rel=0.1)

    def test_logvar_floor_keeps_sample_at_mu(self, tiny_encoder):
        head = init_variational_head(16, 8)
        head.params["vae.logvar.w"].data[...] = 0.0
        head.params["vae.logvar.b"].data[...] = -1000.0
        z = encode_latent(tiny_encoder, head, "MKVLAAG", noise_on=True, seed=2)
        np.testing.assert_array_equal(z.logvar, np.full(8, LOGVAR_MIN))
        assert np.all(np.abs(z.sample - z.mu) <= np.exp(LOGVAR_MIN / 2) * np.abs(z.eps) + 1e-12)
        assert np.max(np.abs(z.sample - z.mu)) < 5e-4


# ── Decoder ───────────────────────────────────────────────


class TestDecoder:
    def test_param_count(self, tiny_decoder_config):
        decoder = init_decoder(tiny_decoder_config)
        assert decoder.num_parameters() == decoder_param_count(tiny_decoder_config)

    def test_logit_shape(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        tokens = encode_many(["MKV", "ACDEF"], 32)
        logits = decoder_logits(decoder, Tensor(rng.normal(size=(2, 8))), tokens.ids)
        assert logits.shape == (2, 7, 30)

    def test_causal(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        z = Tensor(rng.normal(size=(1, 8)))
        a = encode_many(["MKVLLA"], 32).ids
        b = encode_many(["MKVWWW"], 32).ids
        la = decoder_logits(decoder, z, a).data
        lb = decoder_logits(decoder, z, b).data
        np.testing.assert_allclose(la[:, :5], lb[:, :5], rtol=1e-5, atol=1e-6)
        assert not np.allclose(la[:, 5:], lb[:, 5:])

    def test_latent_shape_mismatch(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        with pytest.raises(ShapeError):
            decoder_logits(decoder, Tensor(rng.normal(size=(1, 5))), encode_many(["MKV"], 32).ids)


# ── Generation ────────────────────────────────────────────


class TestGenerate:
    def test_untrained_decoder_refuses(self, tiny_decoder_config):
        decoder = init_decoder(tiny_decoder_config)
        with pytest.raises(UntrainedDecoderError):
            generate(decoder, _latent(np.zeros(8)), GenerationConfig())

    def test_lengths_are_bounded(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        latents = [_latent(rng.normal(size=8)) for _ in range(6)]
        gen = GenerationConfig(max_len=12, sampling="temperature", allow_untrained=True)
        for sequence in generate_many(decoder, latents, gen):
            assert 1 <= len(sequence) <= 10
            assert sequence.isalpha()

    def test_greedy_zero_sigma_is_identical(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        z = _latent(rng.normal(size=8))
        latents = [perturb(z, 0.0, seed=k) for k in range(4)]
        outputs = generate_many(decoder, latents, UNTRAINED)
        assert len(set(outputs)) == 1

    def test_temperature_sampling_is_seeded(self, tiny_decoder_config, rng):
        decoder = init_decoder(tiny_decoder_config)
        latents = [_latent(rng.normal(size=8))] * 3
        gen = GenerationConfig(max_len=12, sampling="temperature", allow_untrained=True, seed=9)
        assert generate_many(decoder, latents, gen) == generate_many(decoder, latents, gen)

    def test_empty_latents(self, tiny_decoder_config):
        assert generate_many(init_decoder(tiny_decoder_config), [], UNTRAINED) == []

    @pytest.mark.parametrize("max_len", [1, 2])
    def test_no_room_for_residues(self, tiny_decoder_config, max_len):
        decoder = init_decoder(tiny_decoder_config)
        gen = GenerationConfig(max_len=max_len, allow_untrained=True)
        assert generate(decoder, _latent(np.zeros(8)), gen) == ""
        assert generate_many(decoder, [_latent(np.ones(8))] * 2, gen) == ["", ""]

    def test_zero_max_len_is_rejected(self, tiny_decoder_config):
        gen = GenerationConfig(max_len=0, allow_untrained=True)
        with pytest.raises(ValueError):
            generate(init_decoder(tiny_decoder_config), _latent(np.zeros(8)), gen)


# ── VAE training ──────────────────────────────────────────


class TestTrainVae:
    def test_encoder_is_untouched(self, tiny_encoder, tiny_decoder_config, corpus):
        before = {name: p.data.copy() for name, p in tiny_encoder.params.items()}
        generator = init_generator(16, tiny_decoder_config)
        cfg = VaeTrainConfig(epochs=2, batch_size=4, warmup_fraction=0.5)
        report = train_vae(tiny_encoder, generator, corpus, cfg)
        for name, p in tiny_encoder.params.items():
            np.testing.assert_array_equal(p.data, before[name])
        assert generator.decoder.trained
        assert report.steps == 6
        assert len(report.components["kl"]) == 6

    def test_beta_warmup_is_linear(self, tiny_encoder, tiny_decoder_config, corpus):
        generator = init_generator(16, tiny_decoder_config)
        cfg = VaeTrainConfig(epochs=2, batch_size=4, kl_weight=0.3, warmup_fraction=0.5)
        report = train_vae(tiny_encoder, generator, corpus, cfg)
        np.testing.assert_allclose(report.components["beta"], [0.1, 0.2, 0.3, 0.3, 0.3, 0.3])

    def test_corpus_cap(self, tiny_encoder, tiny_decoder_config, corpus):
        generator = init_generator(16, tiny_decoder_config)
        cfg = VaeTrainConfig(epochs=1, batch_size=2, corpus_cap=4)
        assert train_vae(tiny_encoder, generator, corpus, cfg).steps == 2

    def test_zero_epochs_leaves_decoder_untrained(self, tiny_encoder, tiny_decoder_config, corpus):
        generator = init_generator(16, tiny_decoder_config)
        train_vae(tiny_encoder, generator, corpus, VaeTrainConfig(epochs=0))
        assert not generator.decoder.trained

    def test_empty_corpus(self, tiny_encoder, tiny_decoder_config):
        with pytest.raises(EmptyDataError):
            train_vae(tiny_encoder, init_generator(16, tiny_decoder_config), [], VaeTrainConfig())

    def test_head_width_must_match_encoder(self, tiny_encoder, tiny_decoder_config, corpus):
        generator = init_generator(32, tiny_decoder_config)
        with pytest.raises(ShapeError):
            train_vae(tiny_encoder, generator, corpus, VaeTrainConfig())


# ── Campaigns ─────────────────────────────────────────────


class TestCampaign:
    def test_rows_and_outputs(self, tiny_encoder, tiny_decoder_config, tmp_path):
        generator = init_generator(16, tiny_decoder_config)
        seeds = [FastaRecord("s1 first", "MKVLAAGW"), FastaRecord("s2", "ACDEFGH")]
        report = seed_generation_campaign(
            tiny_encoder, generator, seeds, [0.0, 1.0], 3, UNTRAINED, seed=1
        )
        assert len(report.rows) == 12
        assert {r.seed_id for r in report.rows} == {"s1", "s2"}
        assert [s["n"] for s in report.summary()] == [6, 6]
        assert all(0.0 <= r.identity <= 1.0 for r in report.rows)

        paths = report.write(tmp_path / "gen")
        assert paths["fasta"].read_text().count(">") == 12
        header = paths["csv"].read_text().splitlines()[0]
        assert header == "seed_id,sigma,sample_idx,length,identity"
        assert paths["summary"].exists()

    def test_campaign_is_reproducible(self, tiny_encoder, tiny_decoder_config, tmp_path):
        generator = init_generator(16, tiny_decoder_config)
        seeds = [FastaRecord("s", "MKVLAAGW")]
        gen = GenerationConfig(max_len=12, sampling="temperature", allow_untrained=True)
        a = seed_generation_campaign(tiny_encoder, generator, seeds, [0.5], 4, gen, seed=2)
        b = seed_generation_campaign(tiny_encoder, generator, seeds, [0.5], 4, gen, seed=2)
        assert [r.sequence for r in a.rows] == [r.sequence for r in b.rows]

    def test_bad_arguments(self, tiny_encoder, tiny_decoder_config):
        generator = init_generator(16, tiny_decoder_config)
        seeds = [FastaRecord("s", "MKV")]
        with pytest.raises(EmptyDataError):
            seed_generation_campaign(tiny_encoder, generator, [], [0.0], 1, UNTRAINED)
        with pytest.raises(ValueError):
            seed_generation_campaign(tiny_encoder, generator, seeds, [-1.0], 1, UNTRAINED)
        with pytest.raises(ValueError):
            seed_generation_campaign(tiny_encoder, generator, seeds, [0.0], 0, UNTRAINED)


# ── Convergence ───────────────────────────────────────────


@pytest.fixture(scope="module")
def reconstruction_setup():
    encoder = init_encoder(
        EncoderConfig(
            num_layers=1, num_heads=2, hidden_dim=16, ffn_dim=32, max_len=32, dropout_rate=0.0
        )
    )
    records = protein_corpus(16, min_len=16, max_len=16, families=16, random_phase=False, seed=0)
    generator = init_generator(
        16,
        DecoderConfig(
            num_layers=1,
            num_heads=2,
            hidden_dim=32,
            ffn_dim=64,
            z_dim=8,
            max_len=24,
            dropout_rate=0.0,
        ),
    )
    before = {name: p.data.copy() for name, p in encoder.params.items()}
    cfg = VaeTrainConfig(epochs=150, batch_size=8, kl_weight=0.01, warmup_fraction=0.2, lr=3e-3)
    train_vae(encoder, generator, [r.sequence for r in records], cfg)
    return encoder, generator, records, before


@pytest.mark.slow
class TestReconstruction:
    def test_greedy_reconstruction_identity(self, reconstruction_setup):
        encoder, generator, records, before = reconstruction_setup
        gen = GenerationConfig(max_len=24)
        identities = []
        for record in records:
            z = encode_latent(encoder, generator.head, record.sequence)
            decoded = generate(generator.decoder, z, gen)
            identities.append(sequence_identity(decoded, record.sequence))
        assert np.mean(identities) >= 0.9
        for name, p in encoder.params.items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_identity_falls_with_noise(self, reconstruction_setup):
        encoder, generator, records, _ = reconstruction_setup
        gen = GenerationConfig(max_len=24, sampling="temperature", temperature=1.0)
        report = seed_generation_campaign(
            encoder, generator, records[:4], [0.0, 0.5, 1.0, 2.0], 20, gen, seed=0
        )
        summary = report.summary()
        assert [s["n"] for s in summary] == [80] * 4
        means = [s["mean_identity"] for s in summary]
        errors = [s["std_error"] for s in summary]
        for i in range(3):
            assert means[i + 1] <= means[i] + max(errors[i], errors[i + 1])
        assert means[-1] < means[0]
