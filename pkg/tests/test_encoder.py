"""Model state, embedding operations, AdamW, privacy noise, checkpoints."""

import math

import numpy as np
import pytest

from fedngdb.encoder import (
    AdamW,
    AdamWConfig,
    ModelState,
    PrivacyConfig,
    embed_disjuncts,
    embed_query,
    init_model,
    intersect_embed,
    load_checkpoint,
    make_batch,
    privatize,
    sample_negatives,
    save_arrays,
    load_arrays,
    save_checkpoint,
    score_entities,
    score_query,
)
from fedngdb.errors import ConfigError, NumericError, VocabularyError
from fedngdb.queries import Anchor, Intersection, Projection, QuerySample, UnionQ


def small_state(seed=0, n_e=6, n_r=3, d=4):
    return init_model(list(range(n_e)), list(range(n_r)), d, seed)


class TestInit:
    def test_shapes_and_bounds(self):
        st = init_model([3, 7, 9], [1, 5], dim=16, seed=1)
        assert st.E.shape == (3, 16) and st.R.shape == (2, 16)
        assert st.W1.shape == (16, 16) and st.b1.shape == (16,)
        bound = 1.0 / math.sqrt(16)
        for arr in (st.E, st.R, st.W1, st.W2):
            assert np.all(np.abs(arr) <= bound)
        assert np.all(st.b1 == 0.0) and np.all(st.b2 == 0.0)
        assert st.local_entity(7) == 1
        assert st.local_relation(5) == 1

    def test_deterministic(self):
        a = init_model([0, 1], [0], 8, seed=3)
        b = init_model([0, 1], [0], 8, seed=3)
        assert np.array_equal(a.E, b.E) and np.array_equal(a.W1, b.W1)

    def test_unknown_ids_raise(self):
        st = small_state()
        with pytest.raises(VocabularyError):
            st.local_entity(99)
        with pytest.raises(VocabularyError):
            st.local_relation(99)

    def test_bad_dim(self):
        with pytest.raises(ConfigError):
            init_model([0], [0], 0, seed=0)


class TestEmbedOps:
    def test_projection_is_translation(self):
        st = small_state()
        q = Projection(1, Anchor(2))
        expected = st.E[2] + st.R[1]
        assert np.allclose(embed_query(q, st), expected, rtol=0, atol=0)

    def test_intersection_formula_by_hand(self):
        st = small_state(seed=5)
        vs = np.stack([st.E[0], st.E[1]])
        m = (st.E[0] + st.E[1]) / 2.0
        pre = st.W1 @ m + st.b1
        expected = st.W2 @ np.maximum(pre, 0.0) + st.b2 + m
        assert np.allclose(intersect_embed(vs, st.W1, st.b1, st.W2, st.b2), expected)

    def test_union_must_be_rewritten(self):
        st = small_state()
        q = UnionQ((Projection(0, Anchor(0)), Projection(1, Anchor(1))))
        with pytest.raises(NumericError):
            embed_query(q, st)
        assert embed_disjuncts(q, st).shape == (2, st.dim)

    def test_score_is_negative_distance(self):
        st = small_state()
        q = Projection(0, Anchor(0))
        qv = embed_query(q, st)
        scores = score_entities(qv, st.E)
        for i in range(len(st.entity_ids)):
            assert math.isclose(scores[i], -np.linalg.norm(qv - st.E[i]), rel_tol=1e-12)

    def test_union_score_is_max_over_disjuncts(self):
        st = small_state()
        q = UnionQ((Projection(0, Anchor(0)), Projection(1, Anchor(1))))
        s0 = score_entities(embed_query(Projection(0, Anchor(0)), st), st.E)
        s1 = score_entities(embed_query(Projection(1, Anchor(1)), st), st.E)
        assert np.allclose(score_query(q, st), np.maximum(s0, s1))


class TestAdamW:
    def test_two_steps_match_hand_formula(self):
        cfg = AdamWConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
        p = {"w": np.array([1.0])}
        opt = AdamW(cfg, p)
        m = v = 0.0
        w = 1.0
        for t, g in ((1, 0.5), (2, -0.25)):
            opt.step(p, {"w": np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            w = w - 0.1 * (mhat / (math.sqrt(vhat) + 1e-8) + 0.01 * w)
            assert math.isclose(p["w"][0], w, rel_tol=1e-14)

    def test_weight_decay_is_decoupled(self):
        # zero gradient still shrinks the weight by lr * wd * w
        cfg = AdamWConfig(lr=0.5, weight_decay=0.1)
        p = {"w": np.array([2.0])}
        opt = AdamW(cfg, p)
        opt.step(p, {"w": np.array([0.0])})
        assert math.isclose(p["w"][0], 2.0 - 0.5 * 0.1 * 2.0, rel_tol=1e-14)

    def test_state_round_trip(self):
        cfg = AdamWConfig()
        p = {"w": np.array([1.0, 2.0])}
        opt = AdamW(cfg, p)
        opt.step(p, {"w": np.array([0.3, -0.2])})
        snap = {"t": opt.t, "m": {k: v.copy() for k, v in opt.m.items()},
                "v": {k: v.copy() for k, v in opt.v.items()}}
        opt2 = AdamW(cfg, p)
        opt2.load_state_dict(snap)
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["w"], opt.m["w"])


class TestPrivacy:
    def test_epsilon_formula(self):
        assert PrivacyConfig(clip=0.1, lam=0.2).epsilon == 1.0
        assert PrivacyConfig(clip=0.5, lam=0.25).epsilon == 4.0
        assert PrivacyConfig(clip=0.1, lam=0.0).epsilon == float("inf")

    def test_clip_bound(self):
        rng = np.random.default_rng(0)
        delta = rng.normal(0, 10.0, size=1000)
        out = privatize(delta, PrivacyConfig(clip=0.1, lam=0.0), rng)
        assert np.all(np.abs(out) <= 0.1)

    def test_noise_scale(self):
        rng = np.random.default_rng(1)
        out = privatize(np.zeros(100_000), PrivacyConfig(clip=1.0, lam=0.2), rng)
        # Laplace(0, b) variance is 2 b^2
        assert abs(out.var() - 2 * 0.2**2) / (2 * 0.2**2) < 0.05
        assert abs(out.mean()) < 0.005

    def test_clip_only_is_deterministic(self):
        delta = np.array([-5.0, 0.05, 5.0])
        out = privatize(delta, PrivacyConfig(clip=0.1, lam=0.0), np.random.default_rng(0))
        assert np.array_equal(out, [-0.1, 0.05, 0.1])

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            PrivacyConfig(clip=0.0)
        with pytest.raises(ConfigError):
            PrivacyConfig(clip=0.1, lam=-1.0)


class TestNegativeSampling:
    def test_excludes_answers(self):
        rng = np.random.default_rng(0)
        negs = sample_negatives({0, 1, 2}, 10, 50, rng)
        assert negs.shape == (50,)
        assert not set(negs.tolist()) & {0, 1, 2}

    def test_falls_back_when_everything_is_an_answer(self):
        rng = np.random.default_rng(0)
        negs = sample_negatives({0, 1, 2}, 3, 5, rng)
        assert set(negs.tolist()) <= {0, 1, 2}

    def test_make_batch_maps_to_local_ids(self):
        st = small_state()
        s = QuerySample(
            query=Projection(0, Anchor(2)),
            qtype="1p",
            locality="in-graph",
            client_id=0,
            answers_train=frozenset({3, 4}),
            answers_val=frozenset({3, 4}),
            answers_test=frozenset({3, 4, 5}),
        )
        batch = make_batch([s], st, np.random.default_rng(0), k_negatives=4)
        assert batch.pos[0] in (3, 4)
        assert batch.negs.shape == (1, 4)
        assert not set(batch.negs[0].tolist()) & {3, 4}


class TestContainers:
    def test_array_container_round_trip(self, tmp_path):
        arrays = {
            "a": np.arange(12, dtype=np.float64).reshape(3, 4),
            "ids": np.array([5, 9], dtype=np.int64),
        }
        meta = {"round": 7, "mode": "fedngdb"}
        p = tmp_path / "box.bin"
        save_arrays(p, arrays, meta)
        got, gmeta = load_arrays(p)
        assert gmeta == meta
        assert np.array_equal(got["a"], arrays["a"]) and got["a"].dtype == np.float64
        assert np.array_equal(got["ids"], arrays["ids"])

    def test_byte_identical(self, tmp_path):
        arrays = {"x": np.linspace(0, 1, 7)}
        save_arrays(tmp_path / "a.bin", arrays, {"k": 1})
        save_arrays(tmp_path / "b.bin", arrays, {"k": 1})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"nope")
        with pytest.raises(ConfigError):
            load_arrays(p)

    def test_checkpoint_round_trip_bit_exact(self, tmp_path):
        st = small_state(seed=9)
        opt = AdamW(AdamWConfig(lr=0.01), st.params())
        rng = np.random.default_rng(123)
        rng.random(5)
        grads = {k: np.full_like(v, 0.125) for k, v in st.params().items()}
        opt.step(st.params(), grads)
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, st, opt, rng, meta={"round": 3, "mode": "fedngdb"})
        st2, opt2, rng2, meta = load_checkpoint(p)
        assert meta == {"round": 3, "mode": "fedngdb"}
        for k in st.params():
            assert np.array_equal(st.params()[k], st2.params()[k])
            assert np.array_equal(opt.m[k], opt2.m[k])
            assert np.array_equal(opt.v[k], opt2.v[k])
        assert opt2.t == opt.t
        assert np.array_equal(st.entity_ids, st2.entity_ids)
        # restored stream continues identically
        assert np.array_equal(rng.random(8), rng2.random(8))

    def test_checkpoint_rewrites_byte_identical(self, tmp_path):
        st = small_state(seed=2)
        save_checkpoint(tmp_path / "a.ckpt", st, meta={"round": 0})
        save_checkpoint(tmp_path / "b.ckpt", st, meta={"round": 0})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
