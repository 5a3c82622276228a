"""Word splitting and signed-hash bag-of-words features."""
import functools
import hashlib
import re

import numpy as np

_WORD = re.compile(r"[a-z0-9]+")


def words(text):
    """Lowercase ``text`` and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


@functools.lru_cache(maxsize=65536)
def token_hash(token, d, seed):
    """(bucket, sign) for ``token``: blake2b over ``"<seed>:<token>"``, 64 bits."""
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    bucket = h % d
    sign = -1.0 if (h >> 63) & 1 else 1.0
    return bucket, sign


def featurize_text(text, d_feat, seed=0):
    """Hashed bag-of-words vector of length ``d_feat``, L2-normalised if nonzero.

    Each token adds its sign to its bucket, so word order never matters.
    """
    if d_feat < 1:
        raise ValueError("d_feat must be >= 1")
    vec = np.zeros(d_feat)
    for tok in words(text):
        bucket, sign = token_hash(tok, d_feat, seed)
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec
