"""Masked secret aggregation for entity embeddings.

Every client generates a static perturbation table at setup and shares it
with every other client over an authenticated channel keyed by pairwise
Diffie-Hellman secrets; the relaying server sees only ciphertext. Each round,
selected clients upload perturbed parameters; the server averages them per
entity (it never sees plaintext) and clients subtract the known mask average
to recover the true mean.

Uploads travel as exact double-double pairs (value, residual) produced by an
error-free transformation of theta + mask, and all sums run in compensated
double-double arithmetic in ascending-client order, so unmasked results match
a correctly rounded plaintext-mean oracle bit for bit at realistic scales.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import dump_arrays, parse_arrays
from .errors import ConfigError, ProtocolError
from .queries import derive_seed

# ---------------------------------------------------------------------------
# compensated (double-double) arithmetic


def two_sum(a, b):
    """Error-free transformation: returns (s, e) with s = fl(a+b) and
    s + e == a + b exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = a + b
    bp = s - a
    e = (a - (s - bp)) + (b - bp)
    return s, e


def dd_accumulate(sum_hi, sum_lo, idx, add_hi, add_lo):
    """In place: (sum_hi, sum_lo)[idx] += (add_hi, add_lo), renormalized."""
    s, e = two_sum(sum_hi[idx], add_hi)
    e = e + (sum_lo[idx] + add_lo)
    r, err = two_sum(s, e)
    sum_hi[idx] = r
    sum_lo[idx] = err


def dd_diff_rounded(a_hi, a_lo, b_hi, b_lo):
    """Round (a - b) to float64, where a and b are double-double values."""
    s, e = two_sum(a_hi, -np.asarray(b_hi, dtype=np.float64))
    e = e + (a_lo - b_lo)
    r, _ = two_sum(s, e)
    return r


# ---------------------------------------------------------------------------
# Diffie-Hellman key agreement

# 2048-bit MODP group (RFC 3526, group 14), generator 2
_GROUP14_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)


@dataclass(frozen=True)
class DHParams:
    """Public modulus and base; the shipped default is a published 2048-bit
    safe-prime group. Small custom groups are for tests only."""

    p: int
    g: int

    def __post_init__(self):
        if self.p < 5 or self.p % 2 == 0:
            raise ConfigError(f"modulus must be an odd number >= 5, got {self.p}")
        if not 1 < self.g < self.p:
            raise ConfigError(f"base must satisfy 1 < g < p, got {self.g}")


DEFAULT_GROUP = DHParams(p=_GROUP14_P, g=2)
TEXTBOOK_GROUP = DHParams(p=23, g=5)


def dh_keypair(params: DHParams, rng: np.random.Generator) -> tuple[int, int]:
    """(secret, public) with secret drawn from the generator's byte stream.

    Secrets are capped at 384 bits (short-exponent practice: ~3x the 2048-bit
    group's strength) so exponentiation stays cheap; tiny test groups fall
    back to the full [2, p-2] range."""
    span = min(params.p - 3, 1 << 384)
    nbytes = (span.bit_length() + 7) // 8 + 16
    secret = 2 + int.from_bytes(rng.bytes(nbytes), "big") % span
    return secret, pow(params.g, secret, params.p)


def dh_shared_secret(params: DHParams, my_secret: int, their_public: int) -> int:
    if not 1 < their_public < params.p:
        raise ProtocolError(f"public value out of range: {their_public}")
    return pow(their_public, my_secret, params.p)


# ---------------------------------------------------------------------------
# authenticated symmetric channel keyed by the DH secret


def pairwise_key(shared_secret: int, a: int, b: int) -> bytes:
    """Symmetric channel key for the (a, b) client pair (order-free)."""
    lo, hi = (a, b) if a <= b else (b, a)
    nbytes = max(1, (shared_secret.bit_length() + 7) // 8)
    material = shared_secret.to_bytes(nbytes, "big")
    return hashlib.sha256(b"pairwise-v1|%d|%d|" % (lo, hi) + material).digest()


def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(key + b"|ks|" + nonce + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:length])


@dataclass(frozen=True)
class EncryptedEnvelope:
    sender: int
    receiver: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes


def seal(key: bytes, sender: int, receiver: int, nonce: bytes, plaintext: bytes) -> EncryptedEnvelope:
    stream = _keystream(key, nonce, len(plaintext))
    ciphertext = bytes(p ^ s for p, s in zip(plaintext, stream))
    mac_key = hashlib.sha256(key + b"|mac|").digest()
    tag = hmac_mod.new(mac_key, nonce + ciphertext, hashlib.sha256).digest()
    return EncryptedEnvelope(sender, receiver, nonce, ciphertext, tag)


def open_envelope(key: bytes, envelope: EncryptedEnvelope) -> bytes:
    mac_key = hashlib.sha256(key + b"|mac|").digest()
    expect = hmac_mod.new(mac_key, envelope.nonce + envelope.ciphertext, hashlib.sha256).digest()
    if not hmac_mod.compare_digest(expect, envelope.tag):
        raise ProtocolError(
            f"authentication failed on envelope {envelope.sender}->{envelope.receiver}"
        )
    stream = _keystream(key, envelope.nonce, len(envelope.ciphertext))
    return bytes(c ^ s for c, s in zip(envelope.ciphertext, stream))


# ---------------------------------------------------------------------------
# client registry: global index maps and existence vectors


@dataclass
class ClientRegistry:
    """Global entity index plus each client's local-to-global row map.

    The map is the sparse equivalent of a permutation/selection matrix; the
    existence vector of a client is exactly the image of its map.
    """

    global_ids: np.ndarray
    local_maps: dict = field(default_factory=dict)

    @property
    def n_global(self) -> int:
        return len(self.global_ids)

    def existence(self, client_id: int) -> np.ndarray:
        v = np.zeros(self.n_global, dtype=bool)
        v[self.local_maps[client_id]] = True
        return v

    def counts(self, selected: Sequence[int]) -> np.ndarray:
        c = np.zeros(self.n_global, dtype=np.int64)
        for i in selected:
            c[self.local_maps[i]] += 1
        return c

    def coverage(self) -> np.ndarray:
        return self.counts(sorted(self.local_maps))


def build_registry(client_entities: dict) -> ClientRegistry:
    """client id -> ascending global entity ids held by that client."""
    if not client_entities:
        raise ConfigError("registry needs at least one client")
    all_ids = sorted(set().union(*[set(map(int, v)) for v in client_entities.values()]))
    global_ids = np.array(all_ids, dtype=np.int64)
    reg = ClientRegistry(global_ids=global_ids)
    for cid, ents in client_entities.items():
        ents = np.asarray(sorted(map(int, ents)), dtype=np.int64)
        pos = np.searchsorted(global_ids, ents)
        if not np.array_equal(global_ids[pos], ents):
            raise ConfigError(f"client {cid} entities missing from global index")
        reg.local_maps[int(cid)] = pos.astype(np.int64)
    return reg


# ---------------------------------------------------------------------------
# mask shares


@dataclass
class MaskShare:
    """One client's static perturbation: an entity-table-shaped block plus
    operator-shaped blocks, drawn once at setup from the owner's stream."""

    owner: int
    e_mask: np.ndarray
    theta_masks: dict

    def to_bytes(self) -> bytes:
        arrays = {"e_mask": self.e_mask}
        for name in sorted(self.theta_masks):
            arrays[f"theta_{name}"] = self.theta_masks[name]
        return dump_arrays(arrays, {"owner": self.owner})

    @classmethod
    def from_bytes(cls, data: bytes) -> "MaskShare":
        arrays, meta = parse_arrays(data, source="mask-share")
        theta = {
            name[len("theta_"):]: arr
            for name, arr in arrays.items()
            if name.startswith("theta_")
        }
        return cls(owner=int(meta["owner"]), e_mask=arrays["e_mask"], theta_masks=theta)


def generate_mask(owner: int, e_shape, theta_shapes: dict, seed: int, bound: float) -> MaskShare:
    rng = np.random.default_rng(derive_seed(seed, "mask", owner))
    e_mask = rng.uniform(-bound, bound, size=e_shape)
    theta_masks = {name: rng.uniform(-bound, bound, size=shape) for name, shape in sorted(theta_shapes.items())}
    return MaskShare(owner=owner, e_mask=e_mask, theta_masks=theta_masks)


def setup_masks(
    shapes: dict,
    dh: DHParams = DEFAULT_GROUP,
    seed: int = 0,
    bound: float = 1024.0,
    theta_shapes: Optional[dict] = None,
    transcript: Optional["Transcript"] = None,
    tamper=None,
):
    """Run the setup phase: per-client masks, pairwise DH keys, encrypted
    all-to-all mask exchange relayed through the (blind) server.

    ``shapes`` maps client id -> entity-table shape. Returns
    (held, envelopes): held[recipient][owner] is that owner's MaskShare as
    decrypted by the recipient; envelopes is the server-relayed ciphertext
    traffic. ``tamper`` (test hook) may rewrite an envelope in transit;
    authentication failure aborts the whole setup.
    """
    if not shapes:
        raise ConfigError("setup needs at least one client")
    clients = sorted(shapes)
    theta_shapes = theta_shapes or {}
    masks = {
        cid: generate_mask(cid, shapes[cid], theta_shapes, seed, bound) for cid in clients
    }
    secrets = {}
    publics = {}
    for cid in clients:
        rng = np.random.default_rng(derive_seed(seed, "dh", cid))
        secrets[cid], publics[cid] = dh_keypair(dh, rng)
    keys = {}
    for i in clients:
        for j in clients:
            if i < j:
                s_i = dh_shared_secret(dh, secrets[i], publics[j])
                s_j = dh_shared_secret(dh, secrets[j], publics[i])
                if s_i != s_j:
                    raise ProtocolError(f"key agreement mismatch for pair ({i},{j})")
                keys[(i, j)] = pairwise_key(s_i, i, j)

    held = {cid: {cid: masks[cid]} for cid in clients}
    envelopes = []
    nonce_rng = np.random.default_rng(derive_seed(seed, "nonce"))
    for i in clients:
        payload = masks[i].to_bytes()
        for j in clients:
            if j == i:
                continue
            key = keys[(min(i, j), max(i, j))]
            env = seal(key, i, j, nonce_rng.bytes(16), payload)
            if tamper is not None:
                env = tamper(env) or env
            envelopes.append(env)
            if transcript is not None:
                transcript.record(-1, "mask-share", i, j, env.ciphertext)
            data = open_envelope(key, env)
            share = MaskShare.from_bytes(data)
            if share.owner != i:
                raise ProtocolError(f"mask share owner mismatch: {share.owner} != {i}")
            held[j][i] = share
    return held, envelopes


# ---------------------------------------------------------------------------
# masked upload / aggregate / unmask (Eqs. 2-4 semantics)


@dataclass
class UploadPayload:
    """Perturbed entity rows as exact (value, residual) pairs, plus plaintext
    operator parameters for plain federated averaging."""

    client_id: int
    e_hi: np.ndarray
    e_lo: np.ndarray
    theta: dict


def masked_upload(client_id: int, E_local: np.ndarray, theta: dict, mask: MaskShare) -> UploadPayload:
    if mask.e_mask.shape != E_local.shape:
        raise ProtocolError(
            f"client {client_id}: mask shape {mask.e_mask.shape} != table shape {E_local.shape}"
        )
    hi, lo = two_sum(E_local, mask.e_mask)
    return UploadPayload(
        client_id=client_id,
        e_hi=hi,
        e_lo=lo,
        theta={k: v.copy() for k, v in theta.items()},
    )


@dataclass
class PerturbedTable:
    """Server-side aggregate: double-double perturbed sums per global entity,
    participation counts, and an untouched marker where no selected client
    held the entity."""

    sum_hi: np.ndarray
    sum_lo: np.ndarray
    count: np.ndarray
    producers: tuple

    @property
    def touched(self) -> np.ndarray:
        return self.count > 0

    def values(self) -> np.ndarray:
        """The nominal perturbed mean table (zeros where untouched)."""
        out = np.zeros_like(self.sum_hi)
        t = self.touched
        out[t] = self.sum_hi[t] / self.count[t, None]
        return out


def server_aggregate_entities(
    payloads: Sequence[UploadPayload], registry: ClientRegistry, selected
) -> PerturbedTable:
    """Per-entity mean of perturbed uploads over the selected clients that
    hold the entity, accumulated in ascending-client order."""
    selected = sorted(int(s) for s in selected)
    by_id = {p.client_id: p for p in payloads}
    if sorted(by_id) != selected:
        raise ProtocolError(f"payload clients {sorted(by_id)} != selected {selected}")
    dim = payloads[0].e_hi.shape[1]
    n = registry.n_global
    sum_hi = np.zeros((n, dim))
    sum_lo = np.zeros((n, dim))
    count = np.zeros(n, dtype=np.int64)
    for cid in selected:
        p = by_id[cid]
        rows = registry.local_maps[cid]
        if p.e_hi.shape != (len(rows), dim) or p.e_lo.shape != (len(rows), dim):
            raise ProtocolError(f"client {cid}: payload shape mismatch")
        dd_accumulate(sum_hi, sum_lo, rows, p.e_hi, p.e_lo)
        count[rows] += 1
    return PerturbedTable(sum_hi, sum_lo, count, producers=tuple(selected))


def mask_sums(registry: ClientRegistry, held_masks: dict, selected, dim: int):
    """Double-double per-entity sums of the selected clients' mask tables."""
    selected = sorted(int(s) for s in selected)
    n = registry.n_global
    m_hi = np.zeros((n, dim))
    m_lo = np.zeros((n, dim))
    for cid in selected:
        if cid not in held_masks:
            raise ProtocolError(f"missing mask share for selected client {cid}")
        rows = registry.local_maps[cid]
        mask = held_masks[cid].e_mask
        dd_accumulate(m_hi, m_lo, rows, mask, np.zeros_like(mask))
    return m_hi, m_lo


def client_unmask(
    table: PerturbedTable,
    client_id: int,
    held_masks: dict,
    registry: ClientRegistry,
    selected=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Recover this client's slice of the true per-entity mean.

    Returns (rows, touched_local): rows is the client-local entity table with
    unmasked means where the aggregate touched the entity (stale rows must be
    kept by the caller), touched_local says which rows those are.
    """
    selected = table.producers if selected is None else tuple(sorted(int(s) for s in selected))
    dim = table.sum_hi.shape[1]
    m_hi, m_lo = mask_sums(registry, held_masks, selected, dim)
    diff = dd_diff_rounded(table.sum_hi, table.sum_lo, m_hi, m_lo)
    values = np.zeros_like(diff)
    t = table.touched
    values[t] = diff[t] / table.count[t, None]
    rows = registry.local_maps[client_id]
    return values[rows], t[rows]


# ---------------------------------------------------------------------------
# generic single-shot secret aggregation over named equal-shape parameters


def secret_aggregate(values: Sequence[dict], masks: Sequence[MaskShare]) -> dict:
    """Full-participation masked mean of named arrays (the generic protocol):
    every client uploads value + mask, the masked sums are accumulated in
    client order, the known mask sum is removed, and the result is the mean
    over all n clients."""
    if len(values) != len(masks) or not values:
        raise ProtocolError("need one mask per participating client")
    n = len(values)
    out = {}
    names = sorted(values[0])
    for v in values:
        if sorted(v) != names:
            raise ProtocolError("clients disagree on parameter names")
    for name in names:
        shape = values[0][name].shape
        s_hi = np.zeros(shape)
        s_lo = np.zeros(shape)
        m_hi = np.zeros(shape)
        m_lo = np.zeros(shape)
        for client_values, mask in zip(values, masks):
            block = mask.theta_masks[name]
            if client_values[name].shape != shape or block.shape != shape:
                raise ProtocolError(f"shape mismatch for parameter {name!r}")
            p_hi, p_lo = two_sum(client_values[name], block)
            _dd_accumulate_all(s_hi, s_lo, p_hi, p_lo)
            _dd_accumulate_all(m_hi, m_lo, block, np.zeros_like(block))
        out[name] = dd_diff_rounded(s_hi, s_lo, m_hi, m_lo) / n
    return out


def _dd_accumulate_all(sum_hi, sum_lo, add_hi, add_lo):
    s, e = two_sum(sum_hi, add_hi)
    e = e + (sum_lo + add_lo)
    r, err = two_sum(s, e)
    sum_hi[...] = r
    sum_lo[...] = err


# ---------------------------------------------------------------------------
# audit transcript


def digest_payload(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if isinstance(a, bytes):
            h.update(a)
        else:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Transcript:
    """Server-visible audit log: digests only, never plaintext parameters."""

    def __init__(self):
        self.records: list[dict] = []

    def record(self, round_idx: int, phase: str, sender, receiver, payload) -> None:
        digest = payload if isinstance(payload, str) else digest_payload(
            *(payload if isinstance(payload, (list, tuple)) else [payload])
        )
        self.records.append(
            {
                "round": round_idx,
                "phase": phase,
                "sender": sender,
                "receiver": receiver,
                "payload_digest": digest,
            }
        )

    def save(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
