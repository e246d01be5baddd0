"""Shared fixtures: a tiny trained copy model used by several suites."""

import numpy as np
import pytest

from dfkdt3.compute import Adam, RngStream, WarmupDecaySchedule, backward, cross_entropy
from dfkdt3.textmodel import EOS_ID, ModelConfig, Seq2SeqModel, shift_right

COPY_CFG = ModelConfig(vocab_size=20, d_model=32, n_heads=2, n_enc_layers=1,
                       n_dec_layers=1, d_ff=64, max_len=12)


def _copy_batch(rng: RngStream, batch: int, lo: int = 3, hi: int = 7):
    length = int(rng.integers(lo, hi))
    ids = rng.integers(3, COPY_CFG.vocab_size, (batch, length))
    targets = np.concatenate(
        [ids, np.full((batch, 1), EOS_ID, dtype=np.int64)], axis=1)
    return ids, targets


def train_copy_model(seed: int = 3, steps: int = 300) -> Seq2SeqModel:
    model = Seq2SeqModel(COPY_CFG, seed=seed)
    opt = Adam(model.param_list(), lr=WarmupDecaySchedule(3e-3, 3e-4, 20, steps))
    rng = RngStream(seed).fork("copy-data")
    for _ in range(steps):
        ids, targets = _copy_batch(rng, batch=16)
        memory, _ = model.encode(ids)
        logits, _ = model.decode_forced(memory, None, tgt_in_ids=shift_right(targets))
        flat = logits.reshape(-1, COPY_CFG.vocab_size)
        loss = cross_entropy(flat, targets.reshape(-1))
        backward(loss)
        opt.step()
        opt.zero_grad()
    return model


@pytest.fixture(scope="session")
def copy_model():
    return train_copy_model()
