"""Counter-based PRNG streams.

Every stream is a numpy ``Philox`` generator keyed from the scenario seed plus
a purpose label, so streams can be split off (shadow runs, moderator
perturbations, per-frame weight noise) without touching the live one.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_key(seed: int, *path: int | str) -> np.ndarray:
    """Philox key for ``seed`` split along ``path`` (ints or labels)."""
    entropy = [int(seed) & _MASK64]
    for part in path:
        if isinstance(part, str):
            entropy.extend(_label_words(part))
        else:
            entropy.append(int(part) & _MASK64)
    return np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)


def stream(seed: int, *path: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))


def get_state(gen: np.random.Generator) -> dict:
    """JSON-friendly copy of the generator state."""
    st = gen.bit_generator.state
    inner = st["state"]
    return {
        "bit_generator": st["bit_generator"],
        "counter": [int(x) for x in inner["counter"]],
        "key": [int(x) for x in inner["key"]],
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": state["bit_generator"],
        "state": {
            "counter": np.array(state["counter"], dtype=np.uint64),
            "key": np.array(state["key"], dtype=np.uint64),
        },
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)
