"""AOS (Abe-Ohkubo-Suzuki) 1-out-of-n Schnorr ring signatures.

Works in the order-``Q`` subgroup of ``Z_P^*`` where ``P`` is a 2048-bit prime
and ``Q`` a 256-bit prime dividing ``P - 1``. A signature is the challenge at
ring position 0 plus one response per member; the verifier walks the ring
once and checks that the challenge chain closes::

    c_{i+1} = H(message, ring, G^s_i * Y_i^c_i)

Nothing in the signature or the verifier depends on which member signed.
"""

from __future__ import annotations

import hashlib
import random
import secrets
import struct
from dataclasses import dataclass
from typing import Sequence

import gmpy2

from .errors import BadKey, MalformedSignature, RingTooSmall

P = gmpy2.mpz(
    0x898CA904D860AC0758F86DA506ACA17F7D8E4C45D0AA18E5C863549167B4E6BFE502D470C20A85756719835D4D9BE09C4B680F46D89A25C516B218683CC34AA54F95313A8419918D1F113CBD236FF733E4A2E76B50327636DFDA07E5FEDDEBD7D53281F85CDFA1B966A1E0754D024B539688BA30276435338F8D9C09AA2C8D6B550136E4BE1B83FC4BD02FE88AAC30B36E004BD844B669941009BFE61C523D4910F88A8B414F2D88ACB91901B92F8A1BC3D81F7106C99F66E8240A9A4A3DA28167DC0232D92B89A4BE16A021CCBAA6206729A5E72D2F736C6533B219357FE99948DC828B5EE3C8A53AFFD90DA0D837B1C712F082D982F00141081FB31F3B46C1
)
Q = gmpy2.mpz(0x8F33092299CB4D5662B38FD3F8D7BBF4661A247FF911916374F72C9033C82999)
G = gmpy2.mpz(
    0x70DD98E364E724DAA02006AA46F6E9E5072FB71AE9CE289E3BC4AFBFE0B632D579FC9655004B27861EFD9AAB1F8FB0703DD8074AADE6DE6487DA75B29396BC2FBDEFEF4ECF9ABB178107AB9749400D198ED1E96AF72E713C1BFE8E7FBC23BB7A8CA2B796EA3C956660EAFF1ED06D3DE97E9C92B003213657C1AD749B1B32039A04FC25DC8216B4B407B1875A54402AD4F2DDDEFC56E14F859D91E55E147884285483BE8946B74661EEB08E23BBB992CBFD777B844BF68F6AEC19A6A9B3AED27E22CC30952E67D704A08A721921AB2DA19B7C471DDABC8DF000397508F3E831B13E1B34A6345B986DBC2CC4F6681E8C955DF887EF0B6260605C3C615F4F7F7343
)

ELEMENT_BYTES = 256
SCALAR_BYTES = 32
_DOMAIN = b"ppbfl/aos-ring/v1"


def _elem_bytes(x) -> bytes:
    return int(x).to_bytes(ELEMENT_BYTES, "little")


def _scalar_bytes(x) -> bytes:
    return int(x).to_bytes(SCALAR_BYTES, "little")


def random_scalar(rng: random.Random | None = None) -> int:
    while True:
        k = (secrets.randbits(256) if rng is None else rng.getrandbits(256)) % int(Q)
        if k:
            return k


@dataclass(frozen=True)
class KeyPair:
    secret: int
    public: int

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "KeyPair":
        x = random_scalar(rng)
        return cls(x, int(gmpy2.powmod(G, x, P)))


def is_group_element(y: int) -> bool:
    return 1 < y < int(P) and gmpy2.powmod(y, Q, P) == 1


@dataclass(frozen=True)
class RingSignature:
    ring: tuple[int, ...]
    challenge: int
    responses: tuple[int, ...]

    def encode(self) -> bytes:
        parts = [struct.pack("<I", len(self.ring))]
        parts += [_elem_bytes(y) for y in self.ring]
        parts.append(_scalar_bytes(self.challenge))
        parts += [_scalar_bytes(s) for s in self.responses]
        return b"".join(parts)

    @staticmethod
    def encoded_length(ring_size: int) -> int:
        return 4 + ring_size * ELEMENT_BYTES + (ring_size + 1) * SCALAR_BYTES

    @classmethod
    def decode(cls, blob: bytes) -> "RingSignature":
        sig, used = cls.decode_prefix(blob)
        if used != len(blob):
            raise MalformedSignature("trailing bytes after signature")
        return sig

    @classmethod
    def decode_prefix(cls, blob: bytes, offset: int = 0) -> tuple["RingSignature", int]:
        """Decode a signature starting at ``offset``; return it and the end offset."""
        if len(blob) - offset < 4:
            raise MalformedSignature("missing ring size")
        (n,) = struct.unpack_from("<I", blob, offset)
        end = offset + cls.encoded_length(n)
        if n < 2 or end > len(blob):
            raise MalformedSignature(f"bad ring size {n} or truncated signature")
        off = offset + 4
        ring = []
        for _ in range(n):
            y = int.from_bytes(blob[off : off + ELEMENT_BYTES], "little")
            if not 1 < y < int(P):
                raise MalformedSignature("ring member out of range")
            ring.append(y)
            off += ELEMENT_BYTES
        scalars = []
        for _ in range(n + 1):
            s = int.from_bytes(blob[off : off + SCALAR_BYTES], "little")
            if s >= int(Q):
                raise MalformedSignature("scalar not reduced mod Q")
            scalars.append(s)
            off += SCALAR_BYTES
        return cls(tuple(ring), scalars[0], tuple(scalars[1:])), end


def _ring_digest(ring: Sequence[int]) -> bytes:
    h = hashlib.sha256(_DOMAIN + b"/ring")
    for y in ring:
        h.update(_elem_bytes(y))
    return h.digest()


def _challenge(message: bytes, ring_digest: bytes, commitment) -> int:
    h = hashlib.sha512()
    h.update(_DOMAIN)
    h.update(struct.pack("<Q", len(message)))
    h.update(message)
    h.update(ring_digest)
    h.update(_elem_bytes(commitment))
    return int.from_bytes(h.digest(), "little") % int(Q)


def ring_sign(
    message: bytes,
    ring: Sequence[int],
    signer_index: int,
    signer_secret: int,
    rng: random.Random | None = None,
) -> RingSignature:
    n = len(ring)
    if n < 2:
        raise RingTooSmall(f"ring of size {n}; need at least 2")
    if not 0 <= signer_index < n:
        raise BadKey(f"signer index {signer_index} outside ring of size {n}")
    if gmpy2.powmod(G, signer_secret, P) != ring[signer_index]:
        raise BadKey("secret does not match the public key at the signer index")

    rd = _ring_digest(ring)
    c = [0] * n
    s = [0] * n
    alpha = random_scalar(rng)
    c[(signer_index + 1) % n] = _challenge(message, rd, gmpy2.powmod(G, alpha, P))
    i = (signer_index + 1) % n
    while i != signer_index:
        s[i] = random_scalar(rng)
        commit = gmpy2.powmod(G, s[i], P) * gmpy2.powmod(ring[i], c[i], P) % P
        c[(i + 1) % n] = _challenge(message, rd, commit)
        i = (i + 1) % n
    # close the ring: G^s * Y^c == G^alpha at the signer's slot
    s[signer_index] = (alpha - signer_secret * c[signer_index]) % int(Q)
    return RingSignature(tuple(int(y) for y in ring), c[0], tuple(int(v) for v in s))


def ring_verify(message: bytes, sig: RingSignature) -> bool:
    n = len(sig.ring)
    if n < 2 or len(sig.responses) != n:
        raise MalformedSignature("ring and response counts disagree")
    if not 0 <= sig.challenge < int(Q) or any(not 0 <= v < int(Q) for v in sig.responses):
        raise MalformedSignature("scalar out of range")
    if any(not 1 < y < int(P) for y in sig.ring):
        return False
    rd = _ring_digest(sig.ring)
    c = sig.challenge
    for y, s in zip(sig.ring, sig.responses):
        c = _challenge(message, rd, gmpy2.powmod(G, s, P) * gmpy2.powmod(y, c, P) % P)
    return c == sig.challenge
