"""Function secret sharing: distributed comparison functions (DCF) and the
masked-comparison gadgets built on them.

A DCF key pair for ``(alpha, beta)`` over an ``n``-bit domain satisfies::

    eval(0, k0, x) + eval(1, k1, x) == beta * [x < alpha]   (mod 2**64)

The construction is the GGM-tree DCF of Boyle et al. (one correction word
per input bit plus a final output correction). Tree expansion uses a
fixed-key AES in Matyas-Meyer-Oseas mode, ``G(s)_j = AES_K(s ^ j) ^ s ^ j``;
all keys of a batch are generated and evaluated together.

Batched keys have ``m`` entries and a payload of ``width`` ring words.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import MaterialExhausted
from .ring import FixedTensor, random_ring
from .sharing import open_values

DOMAIN_BITS = (8, 16, 32, 64)
PRG_KEY = hashlib.sha256(b"securefl/dcf-prg/v1").digest()[:16]
DCF_MAGIC = b"DCF1"
_HALF = np.uint64(1 << 63)
_cipher = Cipher(algorithms.AES(PRG_KEY), modes.ECB())


def prg_blocks(seeds: np.ndarray, nblocks: int, offset: int = 0) -> np.ndarray:
    """Expand (m, 2) uint64 seeds into (m, nblocks, 2) pseudorandom blocks."""
    m = seeds.shape[0]
    tweak = np.zeros((nblocks, 2), dtype=np.uint64)
    tweak[:, 0] = np.arange(offset, offset + nblocks, dtype=np.uint64)
    inp = np.ascontiguousarray(seeds[:, None, :] ^ tweak[None, :, :])
    enc = _cipher.encryptor()
    raw = enc.update(inp.astype("<u8").tobytes()) + enc.finalize()
    out = np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(m, nblocks, 2)
    return out ^ inp


def _nvb(width: int) -> int:
    return (width + 1) // 2


def _expand(seeds: np.ndarray, width: int):
    nvb = _nvb(width)
    blk = prg_blocks(seeds, 2 + 2 * nvb)
    one = np.uint64(1)
    sl, sr = blk[:, 0].copy(), blk[:, 1].copy()
    tl, tr = sl[:, 0] & one, sr[:, 0] & one
    sl[:, 0] &= ~one
    sr[:, 0] &= ~one
    vl = blk[:, 2:2 + nvb].reshape(-1, 2 * nvb)[:, :width]
    vr = blk[:, 2 + nvb:2 + 2 * nvb].reshape(-1, 2 * nvb)[:, :width]
    return sl, tl, vl, sr, tr, vr


def _convert(seeds: np.ndarray, width: int) -> np.ndarray:
    nvb = _nvb(width)
    offset = 2 + 2 * nvb
    return prg_blocks(seeds, nvb, offset).reshape(-1, 2 * nvb)[:, :width]


def _sel(bit, one, zero):
    """Row-wise select: ``one`` where bit == 1, else ``zero``."""
    b = bit.astype(bool)
    if one.ndim > 1:
        b = b.reshape(-1, *([1] * (one.ndim - 1)))
    return np.where(b, one, zero)


def _neg_if(t, v):
    """``(-1)**t * v`` modulo 2**64, row-wise."""
    return _sel(t, np.uint64(0) - v, v)


def _mask(t, v):
    """``t * v`` for a 0/1 vector ``t``, row-wise."""
    return _sel(t, v, np.zeros_like(v))


@dataclass
class DcfKey:
    """One party's batch of DCF keys."""

    party: int
    domain_bits: int
    seed: np.ndarray  # (m, 2) root seeds
    cw_seed: np.ndarray  # (n, m, 2)
    cw_value: np.ndarray  # (n, m, width)
    cw_bits: np.ndarray  # (n, m, 2) uint8 control-bit corrections (left, right)
    cw_final: np.ndarray  # (m, width)

    def __len__(self) -> int:
        return self.seed.shape[0]

    @property
    def width(self) -> int:
        return self.cw_final.shape[1]

    def __getitem__(self, sl) -> DcfKey:
        if isinstance(sl, int):
            sl = slice(sl, sl + 1)
        return DcfKey(self.party, self.domain_bits, self.seed[sl], self.cw_seed[:, sl], self.cw_value[:, sl],
                      self.cw_bits[:, sl], self.cw_final[sl])

    def nbytes_per_key(self) -> int:
        n, w = self.domain_bits, self.width
        return 16 + n * (16 + 8 * w + 1) + 8 * w


def _as_payload(beta, m: int) -> np.ndarray:
    b = np.asarray(beta)
    if b.dtype.kind == "i":
        b = b.astype(np.int64).view(np.uint64)
    b = b.astype(np.uint64)
    if b.ndim == 0:
        b = np.full((m, 1), b, dtype=np.uint64)
    elif b.ndim == 1:
        b = b.reshape(-1, 1) if b.shape[0] == m else np.broadcast_to(b, (m, b.shape[0])).copy()
    if b.shape[0] != m:
        raise ValueError(f"beta has {b.shape[0]} rows for {m} keys")
    return b


def dcf_keygen(alpha, beta, domain_bits: int, rng: np.random.Generator) -> tuple[DcfKey, DcfKey]:
    """Generate DCF key batches for ``f(x) = beta * [x < alpha]``.

    ``alpha`` is a scalar or a length-m array of domain points; ``beta`` a
    scalar, a length-m array, or an (m, width) array of ring payloads.
    """
    if domain_bits not in DOMAIN_BITS:
        raise ValueError(f"domain_bits must be one of {DOMAIN_BITS}, got {domain_bits}")
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.uint64))
    m, n = alpha.shape[0], domain_bits
    if n < 64 and np.any(alpha >> np.uint64(n)):
        raise ValueError(f"alpha outside the {n}-bit domain")
    beta = _as_payload(beta, m)
    width = beta.shape[1]

    s0, s1 = random_ring(rng, (m, 2)), random_ring(rng, (m, 2))
    one = np.uint64(1)
    s0[:, 0] &= ~one
    s1[:, 0] &= ~one
    root0, root1 = s0.copy(), s1.copy()
    t0 = np.zeros(m, dtype=np.uint64)
    t1 = np.ones(m, dtype=np.uint64)
    v_alpha = np.zeros((m, width), dtype=np.uint64)
    cw_seed = np.empty((n, m, 2), dtype=np.uint64)
    cw_value = np.empty((n, m, width), dtype=np.uint64)
    cw_bits = np.empty((n, m, 2), dtype=np.uint8)

    for i in range(n):
        bit = (alpha >> np.uint64(n - 1 - i)) & one
        sl0, tl0, vl0, sr0, tr0, vr0 = _expand(s0, width)
        sl1, tl1, vl1, sr1, tr1, vr1 = _expand(s1, width)
        # bit == 0: keep left, lose right;  bit == 1: keep right, lose left
        s_cw = _sel(bit, sl0, sr0) ^ _sel(bit, sl1, sr1)
        v_lose0, v_lose1 = _sel(bit, vl0, vr0), _sel(bit, vl1, vr1)
        v_keep0, v_keep1 = _sel(bit, vr0, vl0), _sel(bit, vr1, vl1)
        v_cw = _neg_if(t1, v_lose1 - v_lose0 - v_alpha)
        v_cw = v_cw + _mask(bit, _neg_if(t1, beta))
        v_alpha = v_alpha - v_keep1 + v_keep0 + _neg_if(t1, v_cw)
        tl_cw = tl0 ^ tl1 ^ bit ^ one
        tr_cw = tr0 ^ tr1 ^ bit
        t_keep_cw = _sel(bit, tr_cw, tl_cw)
        s0 = _sel(bit, sr0, sl0) ^ _mask(t0, s_cw)
        s1 = _sel(bit, sr1, sl1) ^ _mask(t1, s_cw)
        t0 = _sel(bit, tr0, tl0) ^ (t0 & t_keep_cw)
        t1 = _sel(bit, tr1, tl1) ^ (t1 & t_keep_cw)
        cw_seed[i], cw_value[i] = s_cw, v_cw
        cw_bits[i, :, 0], cw_bits[i, :, 1] = tl_cw, tr_cw

    cw_final = _neg_if(t1, _convert(s1, width) - _convert(s0, width) - v_alpha)
    k0 = DcfKey(0, n, root0, cw_seed, cw_value, cw_bits, cw_final)
    k1 = DcfKey(1, n, root1, cw_seed.copy(), cw_value.copy(), cw_bits.copy(), cw_final.copy())
    return k0, k1


def dcf_eval(party: int, key: DcfKey, x) -> np.ndarray:
    """Evaluate key ``i`` of the batch at ``x[i]``; returns (m,) or (m, width) ring words.

    A scalar ``x`` is evaluated under every key of the batch.
    """
    n, m, width = key.domain_bits, len(key), key.width
    x = np.asarray(x, dtype=np.uint64)
    if x.ndim == 0:
        x = np.full(m, x, dtype=np.uint64)
    if x.shape != (m,):
        raise ValueError(f"need {m} evaluation points, got shape {x.shape}")
    if n < 64 and np.any(x >> np.uint64(n)):
        raise ValueError(f"evaluation point outside the {n}-bit domain")
    one = np.uint64(1)
    s = key.seed
    t = np.full(m, party, dtype=np.uint64)
    acc = np.zeros((m, width), dtype=np.uint64)
    for i in range(n):
        sl, tl, vl, sr, tr, vr = _expand(s, width)
        corr = _mask(t, key.cw_seed[i])
        sl, sr = sl ^ corr, sr ^ corr
        tl = tl ^ (t & key.cw_bits[i, :, 0].astype(np.uint64))
        tr = tr ^ (t & key.cw_bits[i, :, 1].astype(np.uint64))
        bit = (x >> np.uint64(n - 1 - i)) & one
        v = _sel(bit, vr, vl) + _mask(t, key.cw_value[i])
        acc = acc + v
        s, t = _sel(bit, sr, sl), _sel(bit, tr, tl)
    acc = acc + _convert(s, width) + _mask(t, key.cw_final)
    if party == 1:
        acc = np.uint64(0) - acc
    return acc[:, 0] if width == 1 else acc


def serialize_key(key: DcfKey) -> bytes:
    """``DCF1`` | domain_bits:u8 | party:u8 | width:u64 | count:u32, then per key:
    root seed (16 bytes), per level seed correction (16) + value correction
    (8*width) + control bits (1: bit0 left, bit1 right), final correction
    (8*width). Little-endian throughout.

    The payload itself is never stored; the u64 slot after the party byte
    carries the payload width instead.
    """
    n, m, w = key.domain_bits, len(key), key.width
    parts = [DCF_MAGIC, struct.pack("<BBQI", n, key.party, w, m)]
    bits = (key.cw_bits[:, :, 0] | (key.cw_bits[:, :, 1] << 1)).astype(np.uint8)
    for j in range(m):
        level = np.concatenate([key.cw_seed[:, j].astype("<u8").view(np.uint8).reshape(n, 16),
                                key.cw_value[:, j].astype("<u8").view(np.uint8).reshape(n, 8 * w),
                                bits[:, j].reshape(n, 1)], axis=1)
        parts.append(key.seed[j].astype("<u8").tobytes())
        parts.append(level.tobytes())
        parts.append(key.cw_final[j].astype("<u8").tobytes())
    return b"".join(parts)


def deserialize_key(buf: bytes) -> DcfKey:
    if buf[:4] != DCF_MAGIC:
        raise ValueError("bad DCF key magic")
    n, party, w, m = struct.unpack_from("<BBQI", buf, 4)
    pos = 4 + struct.calcsize("<BBQI")
    per = 16 + n * (16 + 8 * w + 1) + 8 * w
    if len(buf) - pos != per * m:
        raise ValueError("truncated DCF key batch")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(m, per)
    seed = raw[:, :16].copy().view("<u8").astype(np.uint64)
    lv = raw[:, 16:16 + n * (17 + 8 * w)].reshape(m, n, 17 + 8 * w)
    cw_seed = lv[:, :, :16].copy().view("<u8").astype(np.uint64).transpose(1, 0, 2)
    cw_value = lv[:, :, 16:16 + 8 * w].copy().view("<u8").astype(np.uint64).transpose(1, 0, 2)
    b = lv[:, :, 16 + 8 * w].T
    cw_bits = np.stack([b & 1, (b >> 1) & 1], axis=-1).astype(np.uint8)
    cw_final = raw[:, per - 8 * w:].copy().view("<u8").astype(np.uint64)
    return DcfKey(party, n, seed, np.ascontiguousarray(cw_seed), np.ascontiguousarray(cw_value),
                  np.ascontiguousarray(cw_bits), cw_final)


# -- masked comparison --------------------------------------------------------

@dataclass
class MaskBatch:
    """One party's material for ``m`` masked sign tests.

    For each element the dealer draws a uniform mask ``r`` and issues two
    DCF keys, at ``alpha = r`` and ``alpha = r + 2**63``, both with payload
    ``(1, r)``, plus a share of the correction ``[r > r + 2**63] * (1, r)``.
    Opening ``u = x + r`` and combining the two evaluations yields shares of
    ``[x >= 0]`` and ``[x >= 0] * r`` exactly, for every signed 64-bit ``x``.
    """

    r: np.ndarray  # (m,) share of the mask
    key_lo: DcfKey
    key_hi: DcfKey
    correction: np.ndarray  # (m, 2)
    consumed: bool = False

    def __len__(self) -> int:
        return self.r.shape[0]

    def split(self, m: int) -> tuple[MaskBatch, MaskBatch]:
        return (MaskBatch(self.r[:m], self.key_lo[:m], self.key_hi[:m], self.correction[:m]),
                MaskBatch(self.r[m:], self.key_lo[m:], self.key_hi[m:], self.correction[m:]))


def deal_masks(rng: np.random.Generator, m: int) -> tuple[MaskBatch, MaskBatch]:
    """Dealer: generate ``m`` comparison masks and split them between two parties."""
    r = random_ring(rng, m)
    s = r + _HALF
    payload = np.stack([np.ones(m, dtype=np.uint64), r], axis=1)
    lo0, lo1 = dcf_keygen(r, payload, 64, rng)
    hi0, hi1 = dcf_keygen(s, payload, 64, rng)
    corr = _mask((r > s).astype(np.uint64), payload)
    r0, c0 = random_ring(rng, m), random_ring(rng, (m, 2))
    return (MaskBatch(r0, lo0, hi0, c0), MaskBatch(r - r0, lo1, hi1, corr - c0))


class MaskStore:
    """A party's single-use supply of comparison masks, served in order."""

    def __init__(self, batches=()):
        self._batches = deque(batches)

    def add(self, batch: MaskBatch) -> None:
        self._batches.append(batch)

    def available(self) -> int:
        return sum(len(b) for b in self._batches)

    def take(self, m: int) -> MaskBatch:
        if self.available() < m:
            raise MaterialExhausted(f"need {m} comparison masks, {self.available()} left")
        got = []
        while m:
            b = self._batches.popleft()
            if len(b) <= m:
                got.append(b)
                m -= len(b)
            else:
                head, tail = b.split(m)
                got.append(head)
                self._batches.appendleft(tail)
                m = 0
        if len(got) == 1:
            out = got[0]
        else:
            out = MaskBatch(np.concatenate([g.r for g in got]), _cat_keys([g.key_lo for g in got]),
                            _cat_keys([g.key_hi for g in got]), np.concatenate([g.correction for g in got]))
        if out.consumed:
            raise MaterialExhausted("comparison mask already consumed")
        out.consumed = True
        return out


def _cat_keys(keys: list[DcfKey]) -> DcfKey:
    k = keys[0]
    return DcfKey(k.party, k.domain_bits, np.concatenate([x.seed for x in keys]),
                  np.concatenate([x.cw_seed for x in keys], axis=1),
                  np.concatenate([x.cw_value for x in keys], axis=1),
                  np.concatenate([x.cw_bits for x in keys], axis=1),
                  np.concatenate([x.cw_final for x in keys]))


def _masked_sign(chan, peer: str, party: int, x: np.ndarray, masks: MaskStore):
    """Shares of ``[x >= 0]`` and ``[x >= 0] * r`` plus the opened ``u`` (one round)."""
    flat = x.reshape(-1)
    mb = masks.take(flat.size)
    (u,) = open_values(chan, peer, [FixedTensor(flat + mb.r, 0)])
    u = u.data
    g = dcf_eval(party, mb.key_hi, u) - dcf_eval(party, mb.key_lo, u) + mb.correction
    return g, u


def secure_sign(chan, peer: str, party: int, x: FixedTensor, masks: MaskStore) -> np.ndarray:
    """Shares (raw 0/1 ring integers) of ``[x >= 0]`` for every element of ``x``."""
    if x.size == 0:
        return np.zeros(x.shape, dtype=np.uint64)
    g, _ = _masked_sign(chan, peer, party, x.data, masks)
    return g[:, 0].reshape(x.shape)


def secure_relu(chan, peer: str, party: int, x: FixedTensor, masks: MaskStore) -> FixedTensor:
    """Shares of ``max(0, x)`` in a single online round.

    With ``g = [x >= 0]`` and public ``u = x + r``, ``g*x = g*u - g*r``;
    both terms are linear in the DCF outputs, so no multiplication is needed.
    """
    if x.size == 0:
        return x
    g, u = _masked_sign(chan, peer, party, x.data, masks)
    out = g[:, 0] * u - g[:, 1]
    return FixedTensor(out.reshape(x.shape), x.frac_bits)


INDEX_BITS = 6


def secure_argmax(chan, peer: str, party: int, logits: FixedTensor, masks: MaskStore) -> FixedTensor:
    """Shares of the one-hot argmax of a 1-D logit vector (ties to the lower index).

    Each logit is tagged with ``63 - i`` in its six low bits so all values
    are distinct and ties favour lower indices. A tournament of
    ``max(a, b) = b + relu(a - b)`` finds the maximum in ``ceil(log2 C)``
    rounds; one more round of sign tests ``[v_i - max >= 0]`` produces the
    one-hot vector. The output is scaled to ``2**frac_bits``.
    """
    if logits.data.ndim != 1:
        raise ValueError("secure_argmax expects a 1-D logit vector")
    c = logits.shape[0]
    if not 1 <= c <= 1 << INDEX_BITS:
        raise ValueError(f"supports 1..{1 << INDEX_BITS} classes, got {c}")
    scale = np.uint64(1 << logits.frac_bits)
    if c == 1:
        return FixedTensor(np.full(1, scale if party == 0 else 0, dtype=np.uint64), logits.frac_bits)
    v = logits.data << np.uint64(INDEX_BITS)
    if party == 0:
        v = v + (np.uint64((1 << INDEX_BITS) - 1) - np.arange(c, dtype=np.uint64))
    level = v
    while level.shape[0] > 1:
        k = level.shape[0] // 2
        a, b = level[0:2 * k:2], level[1:2 * k:2]
        diff = FixedTensor(a - b, 0)
        best = b + secure_relu(chan, peer, party, diff, masks).data
        level = np.concatenate([best, level[2 * k:]])
    gaps = FixedTensor(v - level[0], 0)
    onehot = secure_sign(chan, peer, party, gaps, masks)
    return FixedTensor(onehot * scale, logits.frac_bits)


def argmax_comparisons(c: int) -> int:
    """Sign tests consumed by :func:`secure_argmax` for ``c`` classes."""
    return 0 if c == 1 else (c - 1) + c


def argmax_rounds(c: int) -> int:
    return 0 if c == 1 else int(np.ceil(np.log2(c))) + 1
