"""Masked aggregation protocol: key agreement, envelope authentication,
registry mapping, per-entity masked means, unmask exactness, blindness."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedngdb.errors import ConfigError, ProtocolError
from fedngdb.secureagg import (
    DEFAULT_GROUP,
    TEXTBOOK_GROUP,
    ClientRegistry,
    DHParams,
    EncryptedEnvelope,
    MaskShare,
    PerturbedTable,
    Transcript,
    UploadPayload,
    build_registry,
    client_unmask,
    dd_accumulate,
    dd_diff_rounded,
    dh_keypair,
    dh_shared_secret,
    digest_payload,
    generate_mask,
    mask_sums,
    masked_upload,
    open_envelope,
    pairwise_key,
    seal,
    secret_aggregate,
    server_aggregate_entities,
    setup_masks,
    two_sum,
)

from .oracles import fsum_mean


class TestTwoSum:
    def test_exact_decomposition(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, 1000)
        b = rng.uniform(-1024, 1024, 1000)
        s, e = two_sum(a, b)
        # s is the rounded sum; adding e back in higher precision recovers a+b
        assert np.array_equal(s, a + b)
        for i in range(len(a)):
            assert float(e[i]) == math.fsum([float(a[i]), float(b[i]), -float(s[i])])

    def test_residual_recovers_small_term(self):
        a = np.array([1.0])
        b = np.array([1e-20])
        s, e = two_sum(a, b)
        assert s[0] == 1.0 and e[0] == 1e-20

    def test_dd_accumulate_tracks_exact_sum(self):
        hi = np.zeros(1)
        lo = np.zeros(1)
        vals = [1.0, 1e-17, 1e-17, 1e-17]
        for v in vals:
            dd_accumulate(hi, lo, np.array([0]), np.array([v]), np.array([0.0]))
        total = dd_diff_rounded(hi, lo, np.zeros(1), np.zeros(1))
        assert total[0] == math.fsum(vals)


class TestDH:
    def test_textbook_instance(self):
        # p=23, g=5: 5^6 mod 23 = 8, 5^15 mod 23 = 19, shared secret 2
        p = TEXTBOOK_GROUP
        a, b = 6, 15
        pub_a = pow(p.g, a, p.p)
        pub_b = pow(p.g, b, p.p)
        assert pub_a == 8 and pub_b == 19
        assert dh_shared_secret(p, a, pub_b) == 2
        assert dh_shared_secret(p, b, pub_a) == 2

    def test_pairwise_agreement_default_group(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            sa, pa = dh_keypair(DEFAULT_GROUP, rng)
            sb, pb = dh_keypair(DEFAULT_GROUP, rng)
            assert dh_shared_secret(DEFAULT_GROUP, sa, pb) == dh_shared_secret(DEFAULT_GROUP, sb, pa)

    def test_out_of_range_public_rejected(self):
        with pytest.raises(ProtocolError):
            dh_shared_secret(TEXTBOOK_GROUP, 6, 1)
        with pytest.raises(ProtocolError):
            dh_shared_secret(TEXTBOOK_GROUP, 6, 23)
        with pytest.raises(ProtocolError):
            dh_shared_secret(TEXTBOOK_GROUP, 6, 0)

    def test_bad_params(self):
        with pytest.raises(ConfigError):
            DHParams(p=10, g=2)
        with pytest.raises(ConfigError):
            DHParams(p=23, g=1)


class TestEnvelope:
    def test_round_trip(self):
        key = pairwise_key(123456789, 0, 1)
        env = seal(key, 0, 1, b"n" * 16, b"hello masked world")
        assert env.ciphertext != b"hello masked world"
        assert open_envelope(key, env) == b"hello masked world"

    def test_key_is_order_free(self):
        assert pairwise_key(99, 2, 5) == pairwise_key(99, 5, 2)

    def test_tamper_detected(self):
        key = pairwise_key(77, 0, 1)
        env = seal(key, 0, 1, b"n" * 16, b"payload bytes")
        bad = EncryptedEnvelope(
            env.sender,
            env.receiver,
            env.nonce,
            bytes([env.ciphertext[0] ^ 1]) + env.ciphertext[1:],
            env.tag,
        )
        with pytest.raises(ProtocolError):
            open_envelope(key, bad)

    def test_wrong_key_detected(self):
        env = seal(pairwise_key(1, 0, 1), 0, 1, b"n" * 16, b"x")
        with pytest.raises(ProtocolError):
            open_envelope(pairwise_key(2, 0, 1), env)


class TestRegistry:
    def test_round_trip_identity(self):
        reg = build_registry({0: [2, 5, 9], 1: [5, 7], 2: [2, 7, 9]})
        assert reg.global_ids.tolist() == [2, 5, 7, 9]
        for cid, ents in ((0, [2, 5, 9]), (1, [5, 7]), (2, [2, 7, 9])):
            assert reg.global_ids[reg.local_maps[cid]].tolist() == ents

    def test_existence_and_counts(self):
        reg = build_registry({0: [1, 2], 1: [2, 3]})
        assert reg.existence(0).tolist() == [True, True, False]
        assert reg.counts([0, 1]).tolist() == [1, 2, 1]
        assert reg.counts([1]).tolist() == [0, 1, 1]
        assert reg.coverage().min() >= 1


class TestSetupMasks:
    SHAPES = {0: (3, 4), 1: (2, 4), 2: (4, 4)}

    def test_everyone_holds_everything(self):
        held, envelopes = setup_masks(self.SHAPES, seed=5)
        for cid in self.SHAPES:
            assert sorted(held[cid]) == [0, 1, 2]
        # same share seen identically by every recipient
        for owner in self.SHAPES:
            ref = held[owner][owner]
            for cid in self.SHAPES:
                assert np.array_equal(held[cid][owner].e_mask, ref.e_mask)
        assert len(envelopes) == 6

    def test_single_client_degenerates(self):
        held, envelopes = setup_masks({0: (2, 3)}, seed=0)
        assert sorted(held[0]) == [0] and envelopes == []

    def test_server_sees_only_ciphertext(self):
        held, envelopes = setup_masks(self.SHAPES, seed=1)
        for env in envelopes:
            plain = held[env.receiver][env.sender].to_bytes()
            assert env.ciphertext != plain
            assert plain not in env.ciphertext

    def test_tampered_envelope_aborts(self):
        def flip(env):
            return EncryptedEnvelope(
                env.sender,
                env.receiver,
                env.nonce,
                bytes([env.ciphertext[0] ^ 255]) + env.ciphertext[1:],
                env.tag,
            )

        with pytest.raises(ProtocolError):
            setup_masks(self.SHAPES, seed=1, tamper=flip)

    def test_mask_share_serialization(self):
        share = generate_mask(3, (2, 2), {"W1": (2, 2), "b1": (2,)}, seed=9, bound=8.0)
        back = MaskShare.from_bytes(share.to_bytes())
        assert back.owner == 3
        assert np.array_equal(back.e_mask, share.e_mask)
        assert sorted(back.theta_masks) == ["W1", "b1"]
        assert np.array_equal(back.theta_masks["b1"], share.theta_masks["b1"])
        assert np.all(np.abs(share.e_mask) <= 8.0)


def make_world(n_clients=3, d=4, seed=0, bound=1024.0):
    rng = np.random.default_rng(seed)
    ents = {i: sorted(rng.choice(10, size=rng.integers(3, 7), replace=False).tolist()) for i in range(n_clients)}
    reg = build_registry(ents)
    tables = {i: rng.uniform(-1, 1, size=(len(ents[i]), d)) for i in range(n_clients)}
    held, _ = setup_masks({i: tables[i].shape for i in range(n_clients)}, seed=seed, bound=bound)
    return reg, tables, held, ents


def plaintext_entity_means(reg, tables, selected):
    """fsum-based per-entity mean oracle over the selected holders."""
    d = next(iter(tables.values())).shape[1]
    out = np.zeros((reg.n_global, d))
    touched = np.zeros(reg.n_global, dtype=bool)
    for g_pos in range(reg.n_global):
        rows = []
        for cid in sorted(selected):
            where = np.where(reg.local_maps[cid] == g_pos)[0]
            if len(where):
                rows.append(tables[cid][where[0]])
        if rows:
            touched[g_pos] = True
            for c in range(d):
                out[g_pos, c] = math.fsum(float(r[c]) for r in rows) / len(rows)
    return out, touched


class TestEntityAggregation:
    def test_hand_worked_scalar_case(self):
        # three scalar clients holding the same entity
        reg = build_registry({0: [0], 1: [0], 2: [0]})
        thetas = {0: np.array([[1.0]]), 1: np.array([[2.0]]), 2: np.array([[3.0]])}
        masks = {
            i: MaskShare(owner=i, e_mask=np.array([[m]]), theta_masks={})
            for i, m in ((0, 0.5), (1, -1.0), (2, 2.0))
        }
        payloads = [masked_upload(i, thetas[i], {}, masks[i]) for i in range(3)]
        table = server_aggregate_entities(payloads, reg, [0, 1, 2])
        assert table.values()[0, 0] == pytest.approx(7.5 / 3, abs=0)
        rows, touched = client_unmask(table, 0, masks, reg)
        assert touched[0]
        assert rows[0, 0] == 2.0  # mean(1, 2, 3)

    def test_two_party_average(self):
        reg = build_registry({1: [4], 3: [4]})
        a, c = np.array([[2.5]]), np.array([[0.5]])
        payloads = [
            masked_upload(1, a, {}, MaskShare(1, np.zeros((1, 1)), {})),
            masked_upload(3, c, {}, MaskShare(3, np.zeros((1, 1)), {})),
        ]
        table = server_aggregate_entities(payloads, reg, [1, 3])
        assert table.values()[0, 0] == (2.5 + 0.5) / 2

    def test_zero_mask_payload_is_plaintext(self):
        E = np.array([[1.0, -2.0]])
        p = masked_upload(0, E, {}, MaskShare(0, np.zeros((1, 2)), {}))
        assert np.array_equal(p.e_hi, E) and np.array_equal(p.e_lo, np.zeros((1, 2)))

    def test_payload_minus_mask_is_plaintext(self):
        rng = np.random.default_rng(3)
        E = rng.uniform(-1, 1, (5, 4))
        mask = generate_mask(0, (5, 4), {}, seed=1, bound=1024.0)
        p = masked_upload(0, E, {}, mask)
        # the (hi, lo) pair is exact: hi + lo - mask == E coordinate-wise
        recovered = dd_diff_rounded(p.e_hi, p.e_lo, mask.e_mask, np.zeros_like(mask.e_mask))
        assert np.array_equal(recovered, E)

    def test_untouched_entities_marked(self):
        reg = build_registry({0: [0, 1], 1: [1, 2]})
        masks = {i: generate_mask(i, (2, 2), {}, seed=i, bound=4.0) for i in range(2)}
        tables = {0: np.ones((2, 2)), 1: np.full((2, 2), 3.0)}
        payloads = [masked_upload(0, tables[0], {}, masks[0])]
        table = server_aggregate_entities(payloads, reg, [0])
        assert table.touched.tolist() == [True, True, False]
        rows, touched = client_unmask(table, 1, masks, reg, selected=[0])
        assert touched.tolist() == [True, False]
        assert rows[0, 0] == pytest.approx(1.0)

    def test_single_selected_client_recovers_plaintext(self):
        reg, tables, held, _ = make_world(seed=7)
        payloads = [masked_upload(0, tables[0], {}, held[0][0])]
        table = server_aggregate_entities(payloads, reg, [0])
        rows, touched = client_unmask(table, 0, held[0], reg, selected=[0])
        assert np.array_equal(rows[touched.nonzero()[0]], tables[0][touched.nonzero()[0]])

    def test_unmask_matches_fsum_oracle_bit_exact(self):
        for seed in range(6):
            reg, tables, held, _ = make_world(n_clients=4, d=8, seed=seed)
            selected = [0, 1, 3]
            payloads = [masked_upload(i, tables[i], {}, held[i][i]) for i in selected]
            table = server_aggregate_entities(payloads, reg, selected)
            oracle, o_touched = plaintext_entity_means(reg, tables, selected)
            assert np.array_equal(table.touched, o_touched)
            for cid in range(4):
                rows, touched = client_unmask(table, cid, held[cid], reg)
                want = oracle[reg.local_maps[cid]]
                assert np.array_equal(rows[touched], want[touched])

    def test_shape_mismatch_rejected(self):
        reg, tables, held, _ = make_world(seed=1)
        p = masked_upload(0, tables[0], {}, held[0][0])
        bad = UploadPayload(p.client_id, p.e_hi[:-1], p.e_lo[:-1], {})
        with pytest.raises(ProtocolError):
            server_aggregate_entities([bad], reg, [0])
        q = masked_upload(1, tables[1], {}, held[1][1])
        narrow = UploadPayload(1, q.e_hi[:, :2], q.e_lo[:, :2], {})
        with pytest.raises(ProtocolError):
            server_aggregate_entities([p, narrow], reg, [0, 1])

    def test_wrong_selected_set_rejected(self):
        reg, tables, held, _ = make_world(seed=1)
        p = masked_upload(0, tables[0], {}, held[0][0])
        with pytest.raises(ProtocolError):
            server_aggregate_entities([p], reg, [0, 1])

    def test_missing_mask_share_rejected(self):
        reg, tables, held, _ = make_world(seed=2)
        payloads = [masked_upload(i, tables[i], {}, held[i][i]) for i in range(3)]
        table = server_aggregate_entities(payloads, reg, [0, 1, 2])
        partial = {0: held[0][0], 1: held[0][1]}
        with pytest.raises(ProtocolError):
            client_unmask(table, 0, partial, reg)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_unmask_close_to_oracle_property(self, seed):
        reg, tables, held, _ = make_world(n_clients=3, d=4, seed=seed)
        selected = [0, 1, 2]
        payloads = [masked_upload(i, tables[i], {}, held[i][i]) for i in selected]
        table = server_aggregate_entities(payloads, reg, selected)
        oracle, _ = plaintext_entity_means(reg, tables, selected)
        rows, touched = client_unmask(table, 0, held[0], reg)
        want = oracle[reg.local_maps[0]]
        assert np.max(np.abs(rows[touched] - want[touched])) < 1e-9


class TestGenericSecretAggregate:
    def test_matches_fsum_oracle(self):
        rng = np.random.default_rng(11)
        n = 5
        shapes = {"w": (3, 2), "b": (4,)}
        values = [{k: rng.uniform(-2, 2, s) for k, s in shapes.items()} for _ in range(n)]
        masks = [
            generate_mask(i, (1, 1), shapes, seed=100 + i, bound=1024.0) for i in range(n)
        ]
        agg = secret_aggregate(values, masks)
        for name in shapes:
            oracle = fsum_mean([v[name] for v in values])
            assert np.array_equal(agg[name], oracle)

    def test_mask_count_mismatch(self):
        with pytest.raises(ProtocolError):
            secret_aggregate([{"w": np.zeros(2)}], [])


class TestBlindness:
    def test_payload_never_matches_plaintext(self):
        reg, tables, held, _ = make_world(n_clients=3, d=8, seed=13)
        plain_rows = {tables[i][r].tobytes() for i in range(3) for r in range(len(tables[i]))}
        payloads = [masked_upload(i, tables[i], {}, held[i][i]) for i in range(3)]
        table = server_aggregate_entities(payloads, reg, [0, 1, 2])
        for p in payloads:
            for r in range(p.e_hi.shape[0]):
                assert p.e_hi[r].tobytes() not in plain_rows
        vals = table.values()
        for g in range(reg.n_global):
            assert vals[g].tobytes() not in plain_rows

    def test_masked_coordinates_statistically_independent_of_plaintext(self):
        # same plaintext, two different mask seeds: payloads differ wildly;
        # mask dominates (bound 1024 vs data in [-1, 1])
        rng = np.random.default_rng(2)
        E = rng.uniform(-1, 1, (50, 8))
        m1 = generate_mask(0, E.shape, {}, seed=1, bound=1024.0)
        p1 = masked_upload(0, E, {}, m1)
        corr = np.corrcoef(E.ravel(), p1.e_hi.ravel())[0, 1]
        assert abs(corr) < 0.1

    def test_transcript_contains_digests_only(self, tmp_path):
        tr = Transcript()
        tr.record(0, "upload", 1, "server", np.arange(4.0))
        tr.record(0, "broadcast", "server", None, b"cipherbytes")
        tr.save(tmp_path / "t.jsonl")
        text = (tmp_path / "t.jsonl").read_text()
        assert "payload_digest" in text
        assert digest_payload(np.arange(4.0)) in text
