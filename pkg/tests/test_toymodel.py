import numpy as np
import pytest

from quantlab.errors import (
    BadMagic,
    ContextOverflow,
    ShapeMismatch,
    TokenOutOfRange,
    TruncatedFile,
)
from quantlab.rng import make_rng
from quantlab.toymodel import (
    BOS_ID,
    THINK_END_ID,
    ToyConfig,
    ToyModel,
    forward_reference,
    generate,
    init_model,
    load_model,
    nucleus_filter,
    rmsnorm,
    sample_token,
    save_model,
)

SMALL = ToyConfig(n_layers=1, d_model=16, n_heads=2, head_dim=8,
                  vocab_size=16, max_seq_len=32)


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL, make_rng(0))


class TestConfig:
    def test_shape_consistency_enforced(self):
        with pytest.raises(ValueError):
            ToyConfig(d_model=48, n_heads=2, head_dim=32)

    def test_head_dim_power_of_two(self):
        with pytest.raises(ValueError):
            ToyConfig(d_model=36, n_heads=3, head_dim=12)

    def test_vocab_must_hold_reserved_ids(self):
        with pytest.raises(ValueError):
            ToyConfig(vocab_size=3)

    def test_round_trip_dict(self):
        cfg = ToyConfig()
        assert ToyConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_deterministic_under_seed(self, tmp_path):
        paths = []
        for i in range(2):
            m = init_model(SMALL, make_rng(7))
            p = tmp_path / f"m{i}.tqm"
            save_model(m, p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_different_seeds_differ(self):
        a = init_model(SMALL, make_rng(0))
        b = init_model(SMALL, make_rng(1))
        assert not np.array_equal(a.tensors["embed"], b.tensors["embed"])

    def test_norms_one_biases_zero(self, small_model):
        assert np.all(small_model.tensors["layers.0.norm1"] == 1.0)
        assert np.all(small_model.tensors["layers.0.bq"] == 0.0)

    def test_zero_magnitude_injection_is_identity(self):
        plain = init_model(SMALL, make_rng(3))
        injected = init_model(SMALL, make_rng(3), k_bias_outlier=(0, 5, 0.0))
        for name in plain.tensors:
            assert np.array_equal(plain.tensors[name], injected.tensors[name])

    def test_injection_sets_single_channel(self):
        m = init_model(SMALL, make_rng(4), k_bias_outlier=(0, 5, 400.0))
        bk = m.tensors["layers.0.bk"]
        assert bk[5] == 400.0
        assert np.all(np.delete(bk, 5) == 0.0)

    def test_injection_requires_biases(self):
        cfg = ToyConfig(n_layers=1, d_model=16, n_heads=2, head_dim=8,
                        vocab_size=16, qkv_bias=False)
        with pytest.raises(ValueError):
            init_model(cfg, make_rng(0), k_bias_outlier=(0, 0, 1.0))


class TestForward:
    def test_deterministic(self, small_model):
        tokens = [0, 5, 9, 2, 11]
        a = forward_reference(small_model, tokens)
        b = forward_reference(small_model, tokens)
        assert np.array_equal(a, b)
        assert a.shape == (5, SMALL.vocab_size)

    def test_causality_prefix_invariant(self, small_model):
        """Logits at position i must not depend on later tokens."""
        base = forward_reference(small_model, [0, 5, 9, 2])
        changed = forward_reference(small_model, [0, 5, 9, 7])
        assert np.array_equal(base[:3], changed[:3])
        assert not np.array_equal(base[3], changed[3])

    def test_token_out_of_range(self, small_model):
        with pytest.raises(TokenOutOfRange):
            forward_reference(small_model, [SMALL.vocab_size])
        with pytest.raises(TokenOutOfRange):
            forward_reference(small_model, [-1])

    def test_context_overflow(self, small_model):
        with pytest.raises(ContextOverflow):
            forward_reference(small_model, [0] * (SMALL.max_seq_len + 1))

    def test_rmsnorm_closed_form(self):
        x = np.array([3.0, 4.0])
        g = np.array([2.0, 2.0])
        rms = np.sqrt((9.0 + 16.0) / 2.0 + 1e-6)
        assert np.allclose(rmsnorm(x, g), 2.0 * x / rms)

    def test_rmsnorm_scale_invariant_direction(self):
        x = make_rng(5).standard_normal(8)
        g = np.ones(8)
        a = rmsnorm(x, g)
        b = rmsnorm(1000.0 * x, g)
        assert np.allclose(a, b, atol=1e-6)


class TestSerialization:
    def test_save_load_save_byte_identical(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.tqm", tmp_path / "b.tqm"
        save_model(small_model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_preserves_values(self, small_model, tmp_path):
        p = tmp_path / "m.tqm"
        save_model(small_model, p)
        loaded = load_model(p)
        assert loaded.config == small_model.config
        for name in small_model.tensors:
            assert np.array_equal(loaded.tensors[name],
                                  small_model.tensors[name])

    def test_aux_round_trip(self, small_model, tmp_path):
        m = ToyModel(small_model.config, dict(small_model.tensors),
                     aux={"probe.scales": np.arange(4.0, dtype=np.float32)})
        p = tmp_path / "m.tqm"
        save_model(m, p)
        loaded = load_model(p)
        assert np.array_equal(loaded.aux["probe.scales"], m.aux["probe.scales"])

    def test_bad_magic(self, small_model, tmp_path):
        p = tmp_path / "m.tqm"
        save_model(small_model, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_model(p)

    def test_truncated_file_has_offset(self, small_model, tmp_path):
        p = tmp_path / "m.tqm"
        save_model(small_model, p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFile) as ei:
            load_model(p)
        assert isinstance(ei.value.offset, int)

    def test_tiny_file_truncated(self, tmp_path):
        p = tmp_path / "m.tqm"
        p.write_bytes(b"TQM1")
        with pytest.raises(TruncatedFile):
            load_model(p)

    def test_missing_tensor_rejected(self, small_model, tmp_path):
        import json
        import struct

        p = tmp_path / "m.tqm"
        save_model(small_model, p)
        raw = p.read_bytes()
        hdr_len = struct.unpack_from("<I", raw, 5)[0]
        header = json.loads(raw[9 : 9 + hdr_len].decode())
        header["tensors"] = [t for t in header["tensors"]
                             if t["name"] != "norm_f"]
        new_hdr = json.dumps(header, sort_keys=True,
                             separators=(",", ":")).encode()
        buf = bytearray(raw)
        # shrinking the manifest keeps the header shorter; pad to old length
        new_hdr = new_hdr + b" " * (hdr_len - len(new_hdr))
        buf[9 : 9 + hdr_len] = new_hdr
        p.write_bytes(bytes(buf))
        with pytest.raises(ShapeMismatch):
            load_model(p)


class TestSampling:
    def test_nucleus_keeps_top_mass(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        out = nucleus_filter(probs, 0.8)
        assert out[2] == 0.0 and out[3] == 0.0
        assert np.isclose(out.sum(), 1.0)
        assert out[0] > out[1] > 0.0

    def test_nucleus_top_p_one_keeps_all(self):
        probs = np.full(8, 0.125)
        out = nucleus_filter(probs, 1.0)
        assert np.allclose(out, probs)

    def test_nucleus_property_support_and_mass(self):
        rng = make_rng(6)
        for _ in range(50):
            p = rng.dirichlet(np.ones(12))
            out = nucleus_filter(p, 0.9)
            kept = out > 0
            # kept set is a prefix in descending-probability order
            assert p[kept].min() >= p[~kept].max() - 1e-15
            # minimal: kept mass reaches 0.9, dropping the smallest kept
            # entry would fall below it
            mass = p[kept].sum()
            assert mass >= 0.9 - 1e-12
            assert mass - p[kept].min() < 0.9
            assert np.isclose(out.sum(), 1.0)

    def test_greedy_is_argmax(self):
        logits = np.array([0.1, 2.0, -1.0])
        assert sample_token(logits, 0.0, 0.95, None) == 1

    def test_generate_greedy_deterministic(self, small_model):
        a = generate(small_model, [BOS_ID], max_new=8, temperature=0.0)
        b = generate(small_model, [BOS_ID], max_new=8, temperature=0.0)
        assert a == b and len(a) == 9

    def test_generate_seeded_reproducible(self, small_model):
        a = generate(small_model, [BOS_ID], max_new=8, rng=make_rng(9))
        b = generate(small_model, [BOS_ID], max_new=8, rng=make_rng(9))
        c = generate(small_model, [BOS_ID], max_new=8, rng=make_rng(10))
        assert a == b
        assert all(0 <= t < SMALL.vocab_size for t in a)
        assert a != c or True  # different seed may coincide; just sanity

    def test_generate_requires_rng_when_sampling(self, small_model):
        with pytest.raises(ValueError):
            generate(small_model, [BOS_ID], max_new=4, temperature=0.6)

    def test_generate_context_guard(self, small_model):
        with pytest.raises(ContextOverflow):
            generate(small_model, [BOS_ID], max_new=SMALL.max_seq_len,
                     temperature=0.0)

    def test_reserved_ids(self):
        assert (BOS_ID, THINK_END_ID) == (0, 2)
