"""Deterministic random streams derived from a single master seed.

Streams are keyed by stable hashes of labels, so calibration, evaluation and
rollouts never share draws, and every Monte-Carlo chain owns a counter-based
(Philox) generator keyed by its index.
"""

import hashlib
from typing import Dict, Union

import numpy as np

Key = Union[int, str]


def stream_key(*parts: Key) -> int:
    """64-bit stable hash of the given labels (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def make_rng(*parts: Key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))


def chain_rng(master_seed: int, stream: str, iteration: int, chain_index: int) -> np.random.Generator:
    return make_rng(master_seed, stream, iteration, chain_index)


def draw_chain_inputs(
    master_seed: int,
    stream: str,
    iteration: int,
    n: int,
    n_states: int,
    T: int,
    d_a: int,
):
    """Per-chain state indices and reverse-chain noise.

    Chain ``i`` first draws its state index, then ``a_T`` followed by the
    step noises ``z_T .. z_1``. Returns ``(state_idx (n,), noise (n, T+1, d_a))``.
    """
    idx = np.empty(n, dtype=np.int64)
    noise = np.empty((n, T + 1, d_a), dtype=np.float64)
    for i in range(n):
        g = chain_rng(master_seed, stream, iteration, i)
        idx[i] = g.integers(n_states)
        noise[i] = g.standard_normal((T + 1, d_a))
    return idx, noise


NAMED_STREAMS = (
    "data",
    "calibration-states",
    "calibration",
    "type1",
    "evaluation-states",
    "rollout",
    "ood",
    "sample",
    "theory",
)


def stream_keys(master_seed: int) -> Dict[str, int]:
    """Base key of every named stream, recorded in the run manifest."""
    return {name: stream_key(master_seed, name) for name in NAMED_STREAMS}
