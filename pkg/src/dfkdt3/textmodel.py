"""Tokenizer/vocabulary, the shared encoder-decoder transformer used in the
teacher/student/generator roles, and the hybrid prompt.

Architecture notes: pre-norm residual blocks (the per-layer hidden trace
records the normalized pre-residual state of each block's first sublayer),
learned absolute position embeddings, ReLU feed-forward, no dropout, separate
output projection. Decoding starts from the PAD token.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import RngStream, Tensor

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2

PAD_TOKEN = "<pad>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"

RESERVED_TOKENS = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN]


class Vocab:
    """Dense id <-> token map over whitespace-tokenized text."""

    def __init__(self, tokens: list[str]):
        if tokens[:3] != RESERVED_TOKENS:
            raise ValueError("vocab must start with the reserved tokens "
                             f"{RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = [self.index.get(tok, UNK_ID) for tok in text.split()]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID and stop_at_eos:
                break
            if i == PAD_ID:
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_enc_layers: int
    n_dec_layers: int
    d_ff: int
    max_len: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dropout != 0.0:
            raise ValueError("desk-scale models run without dropout")

    def strictly_larger_than(self, other: "ModelConfig") -> bool:
        return (self.d_model > other.d_model
                and self.n_enc_layers > other.n_enc_layers
                and self.n_dec_layers > other.n_dec_layers)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_heads": self.n_heads, "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers, "d_ff": self.d_ff,
            "max_len": self.max_len, "dropout": self.dropout,
        }


@dataclass
class HiddenTrace:
    """Normalized pre-residual states, one per layer and side."""
    encoder_states: list = field(default_factory=list)
    decoder_states: list = field(default_factory=list)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return C.reshape(x, (b, t, n_heads, d // n_heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return C.reshape(x.transpose((0, 2, 1, 3)), (b, t, h * dh))


def _attention(q: Tensor, k: Tensor, v: Tensor, add_mask: np.ndarray | None) -> Tensor:
    dh = q.shape[-1]
    scores = C.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if add_mask is not None:
        scores = scores + Tensor(add_mask)
    return C.matmul(C.softmax(scores, axis=-1), v)


def _pad_to_add_mask(pad_mask: np.ndarray | None) -> np.ndarray | None:
    """[B, S] boolean (True = real token) -> additive [B, 1, 1, S] mask."""
    if pad_mask is None:
        return None
    return np.where(pad_mask[:, None, None, :], 0.0, -1e9)


def _causal_mask(t: int) -> np.ndarray:
    m = np.triu(np.full((t, t), -1e9), k=1)
    return m[None, None, :, :]


class _DecodeCache:
    """Self-attention K/V grown step by step plus precomputed memory K/V."""

    def __init__(self, model: "Seq2SeqModel", memory: Tensor,
                 mem_pad_mask: np.ndarray | None):
        self.model = model
        self.t = 0
        self.self_k = [None] * model.config.n_dec_layers
        self.self_v = [None] * model.config.n_dec_layers
        self.mem_mask = _pad_to_add_mask(mem_pad_mask)
        self.mem_k = []
        self.mem_v = []
        for i in range(model.config.n_dec_layers):
            p = model.params
            self.mem_k.append(_split_heads(C.matmul(memory, p[f"dec{i}.cross.wk"]),
                                           model.config.n_heads))
            self.mem_v.append(_split_heads(C.matmul(memory, p[f"dec{i}.cross.wv"]),
                                           model.config.n_heads))


class Seq2SeqModel:
    """Encoder-decoder transformer over a shared vocabulary."""

    def __init__(self, config: ModelConfig, seed: int = 0, init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if init:
            self._init_params(RngStream(seed).fork("params"))

    def _init_params(self, rng: RngStream) -> None:
        cfg = self.config
        std = 0.02

        def w(name, shape, scale=std):
            self.params[name] = Tensor(rng.normal(shape, std=scale), requires_grad=True)

        def ones(name, dim):
            self.params[name] = Tensor(np.ones(dim), requires_grad=True)

        w("tok_emb", (cfg.vocab_size, cfg.d_model))
        w("pos_enc", (cfg.max_len, cfg.d_model))
        w("pos_dec", (cfg.max_len, cfg.d_model))
        for i in range(cfg.n_enc_layers):
            ones(f"enc{i}.ln1", cfg.d_model)
            for nm in ("wq", "wk", "wv", "wo"):
                w(f"enc{i}.attn.{nm}", (cfg.d_model, cfg.d_model))
            ones(f"enc{i}.ln2", cfg.d_model)
            w(f"enc{i}.ffn.w1", (cfg.d_model, cfg.d_ff))
            w(f"enc{i}.ffn.w2", (cfg.d_ff, cfg.d_model))
        ones("enc.ln_f", cfg.d_model)
        for i in range(cfg.n_dec_layers):
            ones(f"dec{i}.ln1", cfg.d_model)
            for nm in ("wq", "wk", "wv", "wo"):
                w(f"dec{i}.self.{nm}", (cfg.d_model, cfg.d_model))
            ones(f"dec{i}.ln2", cfg.d_model)
            for nm in ("wq", "wk", "wv", "wo"):
                w(f"dec{i}.cross.{nm}", (cfg.d_model, cfg.d_model))
            ones(f"dec{i}.ln3", cfg.d_model)
            w(f"dec{i}.ffn.w1", (cfg.d_model, cfg.d_ff))
            w(f"dec{i}.ffn.w2", (cfg.d_ff, cfg.d_model))
        ones("dec.ln_f", cfg.d_model)
        w("out_proj", (cfg.d_model, cfg.vocab_size))

    # -- parameter management -------------------------------------------------

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("parameter names do not match the model config")
        for k, t in self.params.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = np.asarray(arrays[k], dtype=np.float64).copy()

    def clone(self) -> "Seq2SeqModel":
        m = Seq2SeqModel(self.config, init=False)
        for k, t in self.params.items():
            m.params[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return m

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["model_config"] = json.dumps(self.config.to_dict(), sort_keys=True)
        C.save_checkpoint(path, self.state_arrays(), meta=meta)

    @classmethod
    def load(cls, path) -> tuple["Seq2SeqModel", dict]:
        arrays, meta = C.load_checkpoint(path)
        cfg = ModelConfig(**json.loads(meta["model_config"]))
        model = cls(cfg, init=True)
        model.load_state(arrays)
        return model, meta

    # -- embedding helpers -----------------------------------------------------

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        return C.embedding_lookup(self.params["tok_emb"], ids)

    def embed_soft(self, probs: Tensor) -> Tensor:
        return C.soft_embedding(probs, self.params["tok_emb"])

    # -- encoder ---------------------------------------------------------------

    def encode(self, token_ids: np.ndarray | None = None,
               embeds: Tensor | None = None,
               pad_mask: np.ndarray | None = None):
        """Returns (memory, per-layer trace list). Positions added here."""
        cfg = self.config
        if embeds is None:
            embeds = self.embed_ids(np.asarray(token_ids))
        b, s, _ = embeds.shape
        if s > cfg.max_len:
            raise ValueError(f"source length {s} exceeds max_len {cfg.max_len}")
        x = embeds + self.params["pos_enc"][:s]
        add_mask = _pad_to_add_mask(pad_mask)
        trace = []
        for i in range(cfg.n_enc_layers):
            p = self.params
            h = C.layer_norm(x, p[f"enc{i}.ln1"])
            trace.append(h)
            q = _split_heads(C.matmul(h, p[f"enc{i}.attn.wq"]), cfg.n_heads)
            k = _split_heads(C.matmul(h, p[f"enc{i}.attn.wk"]), cfg.n_heads)
            v = _split_heads(C.matmul(h, p[f"enc{i}.attn.wv"]), cfg.n_heads)
            ctx = _merge_heads(_attention(q, k, v, add_mask))
            x = x + C.matmul(ctx, p[f"enc{i}.attn.wo"])
            h2 = C.layer_norm(x, p[f"enc{i}.ln2"])
            x = x + C.matmul(C.relu(C.matmul(h2, p[f"enc{i}.ffn.w1"])),
                             p[f"enc{i}.ffn.w2"])
        memory = C.layer_norm(x, self.params["enc.ln_f"])
        return memory, trace

    # -- decoder (teacher-forced, full sequence) --------------------------------

    def decode_forced(self, memory: Tensor, mem_pad_mask: np.ndarray | None,
                      tgt_in_ids: np.ndarray | None = None,
                      tgt_in_embeds: Tensor | None = None,
                      tgt_pad_mask: np.ndarray | None = None):
        """Returns (logits [B, T, vocab], per-layer trace list)."""
        cfg = self.config
        if tgt_in_embeds is None:
            tgt_in_embeds = self.embed_ids(np.asarray(tgt_in_ids))
        b, t, _ = tgt_in_embeds.shape
        if t > cfg.max_len:
            raise ValueError(f"target length {t} exceeds max_len {cfg.max_len}")
        x = tgt_in_embeds + self.params["pos_dec"][:t]
        self_mask = _causal_mask(t)
        if tgt_pad_mask is not None:
            self_mask = self_mask + _pad_to_add_mask(tgt_pad_mask)
        mem_mask = _pad_to_add_mask(mem_pad_mask)
        trace = []
        for i in range(cfg.n_dec_layers):
            p = self.params
            h = C.layer_norm(x, p[f"dec{i}.ln1"])
            trace.append(h)
            q = _split_heads(C.matmul(h, p[f"dec{i}.self.wq"]), cfg.n_heads)
            k = _split_heads(C.matmul(h, p[f"dec{i}.self.wk"]), cfg.n_heads)
            v = _split_heads(C.matmul(h, p[f"dec{i}.self.wv"]), cfg.n_heads)
            ctx = _merge_heads(_attention(q, k, v, self_mask))
            x = x + C.matmul(ctx, p[f"dec{i}.self.wo"])
            h2 = C.layer_norm(x, p[f"dec{i}.ln2"])
            q = _split_heads(C.matmul(h2, p[f"dec{i}.cross.wq"]), cfg.n_heads)
            km = _split_heads(C.matmul(memory, p[f"dec{i}.cross.wk"]), cfg.n_heads)
            vm = _split_heads(C.matmul(memory, p[f"dec{i}.cross.wv"]), cfg.n_heads)
            ctx = _merge_heads(_attention(q, km, vm, mem_mask))
            x = x + C.matmul(ctx, p[f"dec{i}.cross.wo"])
            h3 = C.layer_norm(x, p[f"dec{i}.ln3"])
            x = x + C.matmul(C.relu(C.matmul(h3, p[f"dec{i}.ffn.w1"])),
                             p[f"dec{i}.ffn.w2"])
        out = C.layer_norm(x, self.params["dec.ln_f"])
        logits = C.matmul(out, self.params["out_proj"])
        return logits, trace

    # -- decoder (incremental) ---------------------------------------------------

    def start_decode(self, memory: Tensor,
                     mem_pad_mask: np.ndarray | None) -> _DecodeCache:
        return _DecodeCache(self, memory, mem_pad_mask)

    def decode_one(self, cache: _DecodeCache, step_embeds: Tensor) -> Tensor:
        """Advance one position given [B, 1, d_model] input embeddings; returns
        next-token logits [B, vocab]."""
        cfg = self.config
        t = cache.t
        if t >= cfg.max_len:
            raise ValueError("decode exceeded max_len")
        x = step_embeds + self.params["pos_dec"][t:t + 1]
        for i in range(cfg.n_dec_layers):
            p = self.params
            h = C.layer_norm(x, p[f"dec{i}.ln1"])
            q = _split_heads(C.matmul(h, p[f"dec{i}.self.wq"]), cfg.n_heads)
            k = _split_heads(C.matmul(h, p[f"dec{i}.self.wk"]), cfg.n_heads)
            v = _split_heads(C.matmul(h, p[f"dec{i}.self.wv"]), cfg.n_heads)
            if cache.self_k[i] is None:
                ks, vs = k, v
            else:
                ks = C.concat([cache.self_k[i], k], axis=2)
                vs = C.concat([cache.self_v[i], v], axis=2)
            cache.self_k[i], cache.self_v[i] = ks, vs
            ctx = _merge_heads(_attention(q, ks, vs, None))
            x = x + C.matmul(ctx, p[f"dec{i}.self.wo"])
            h2 = C.layer_norm(x, p[f"dec{i}.ln2"])
            q = _split_heads(C.matmul(h2, p[f"dec{i}.cross.wq"]), cfg.n_heads)
            ctx = _merge_heads(_attention(q, cache.mem_k[i], cache.mem_v[i],
                                          cache.mem_mask))
            x = x + C.matmul(ctx, p[f"dec{i}.cross.wo"])
            h3 = C.layer_norm(x, p[f"dec{i}.ln3"])
            x = x + C.matmul(C.relu(C.matmul(h3, p[f"dec{i}.ffn.w1"])),
                             p[f"dec{i}.ffn.w2"])
        cache.t = t + 1
        out = C.layer_norm(x, self.params["dec.ln_f"])
        logits = C.matmul(out, self.params["out_proj"])
        return C.reshape(logits, (logits.shape[0], logits.shape[2]))


# ---------------------------------------------------------------------------
# hybrid prompt
# ---------------------------------------------------------------------------

class HybridPrompt:
    """Frozen commander token ids followed by trainable soft-prompt rows."""

    def __init__(self, commander_ids: list[int], soft_prompt: Tensor):
        self.commander_ids = list(commander_ids)
        self.soft_prompt = soft_prompt
        self.soft_prompt.requires_grad = True

    @property
    def length(self) -> int:
        return self.soft_prompt.shape[0]

    @classmethod
    def from_vocab_sample(cls, model: Seq2SeqModel, commander_ids: list[int],
                          length: int, rng: RngStream) -> "HybridPrompt":
        """Rows initialized from embeddings of sampled vocabulary tokens."""
        ids = rng.fork("prompt-init").integers(3, model.config.vocab_size, (length,))
        rows = model.params["tok_emb"].data[ids].copy()
        return cls(commander_ids, Tensor(rows, requires_grad=True))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"soft_prompt": self.soft_prompt.data.copy(),
                "commander_ids": np.asarray(self.commander_ids, dtype=np.float64)}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "HybridPrompt":
        ids = [int(i) for i in arrays["commander_ids"]]
        return cls(ids, Tensor(arrays["soft_prompt"].copy(), requires_grad=True))


def encode_with_prompt(model: Seq2SeqModel, prompt: HybridPrompt,
                       x_ids: np.ndarray, x_pad_mask: np.ndarray | None = None):
    """Encoder pass over [commander ; soft prompt rows ; x].

    Returns (memory, pad_mask, trace). If the combined length would exceed
    max_len, x is truncated from the right with a warning.
    """
    x_ids = np.asarray(x_ids)
    b, sx = x_ids.shape
    n_fixed = len(prompt.commander_ids) + prompt.length
    budget = model.config.max_len - n_fixed
    if budget <= 0:
        raise ValueError("commander plus prompt leave no room for input")
    if sx > budget:
        warnings.warn(f"input length {sx} truncated to {budget} to fit max_len")
        x_ids = x_ids[:, :budget]
        if x_pad_mask is not None:
            x_pad_mask = x_pad_mask[:, :budget]
        sx = budget
    parts = []
    if prompt.commander_ids:
        cmd = np.tile(np.asarray(prompt.commander_ids)[None, :], (b, 1))
        parts.append(model.embed_ids(cmd))
    if prompt.length:
        soft = C.reshape(prompt.soft_prompt, (1, prompt.length, -1))
        parts.append(C.broadcast_to(soft, (b, prompt.length, soft.shape[2])))
    parts.append(model.embed_ids(x_ids))
    embeds = C.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if x_pad_mask is None:
        x_pad_mask = np.ones((b, sx), dtype=bool)
    pad_mask = np.concatenate(
        [np.ones((b, n_fixed), dtype=bool), x_pad_mask], axis=1)
    memory, trace = model.encode(embeds=embeds, pad_mask=pad_mask)
    return memory, pad_mask, trace


# ---------------------------------------------------------------------------
# decoding entry points
# ---------------------------------------------------------------------------

def decode_step(model: Seq2SeqModel, memory: Tensor,
                mem_pad_mask: np.ndarray | None, prefix) -> Tensor:
    """Next-token logits [B, vocab] after teacher-forcing a prefix.

    prefix is either an id array [B, T] or soft one-hots [B, T, vocab].
    """
    if isinstance(prefix, Tensor):
        if prefix.ndim != 3:
            raise ValueError("soft prefix must be [B, T, vocab]")
        embeds = model.embed_soft(prefix)
        logits, _ = model.decode_forced(memory, mem_pad_mask, tgt_in_embeds=embeds)
    else:
        prefix = np.asarray(prefix)
        if prefix.ndim != 2 or prefix.shape[1] < 1:
            raise ValueError("prefix must be [B, T>=1] token ids")
        logits, _ = model.decode_forced(memory, mem_pad_mask, tgt_in_ids=prefix)
    return logits[:, -1, :]


def greedy_decode(model: Seq2SeqModel, memory: Tensor,
                  mem_pad_mask: np.ndarray | None, max_steps: int,
                  start_id: int = PAD_ID, min_steps: int = 1):
    """Greedy argmax decoding.

    Returns (ids [B, T], logits Tensor [B, T, vocab], step_mask [B, T]) where
    step_mask covers positions up to and including each row's first EOS.
    Stops early once every row has emitted EOS (but not before min_steps).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    b = memory.shape[0]
    cache = model.start_decode(memory, mem_pad_mask)
    prev = np.full((b, 1), start_id, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    ids = []
    logit_steps = []
    for step in range(max_steps):
        logits = model.decode_one(cache, model.embed_ids(prev))
        logit_steps.append(logits)
        nxt = np.argmax(logits.data, axis=-1)
        nxt = np.where(finished, PAD_ID, nxt)
        ids.append(nxt)
        finished |= nxt == EOS_ID
        prev = nxt[:, None]
        if finished.all() and step + 1 >= min_steps:
            break
    ids = np.stack(ids, axis=1)
    logits = C.stack(logit_steps, axis=1)
    step_mask = _mask_through_eos(ids)
    return ids, logits, step_mask


def _mask_through_eos(ids: np.ndarray) -> np.ndarray:
    """True for steps up to and including each row's first EOS."""
    is_eos = ids == EOS_ID
    seen_before = np.cumsum(is_eos, axis=1) - is_eos
    return seen_before == 0


def shift_right(targets: np.ndarray, start_id: int = PAD_ID) -> np.ndarray:
    b = targets.shape[0]
    return np.concatenate(
        [np.full((b, 1), start_id, dtype=targets.dtype), targets[:, :-1]], axis=1)


def forward_teacher_student(teacher: Seq2SeqModel, student: Seq2SeqModel,
                            batch_ids: np.ndarray,
                            pad_mask: np.ndarray | None = None,
                            max_steps: int = 8):
    """Aligned per-step logits under teacher forcing on the teacher's own
    greedy targets.

    Returns ((t_logits, t_trace), (s_logits, s_trace), targets, step_mask).
    Teacher-side tensors carry no gradients.
    """
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student must share one tokenizer")
    with C.no_grad():
        t_memory, t_enc_trace = teacher.encode(batch_ids, pad_mask=pad_mask)
        targets, _, step_mask = greedy_decode(teacher, t_memory, pad_mask, max_steps)
        t_logits, t_dec_trace = teacher.decode_forced(
            t_memory, pad_mask, tgt_in_ids=shift_right(targets))
    s_memory, s_enc_trace = student.encode(batch_ids, pad_mask=pad_mask)
    s_logits, s_dec_trace = student.decode_forced(
        s_memory, pad_mask, tgt_in_ids=shift_right(targets))
    t_pack = (t_logits, HiddenTrace(t_enc_trace, t_dec_trace))
    s_pack = (s_logits, HiddenTrace(s_enc_trace, s_dec_trace))
    return t_pack, s_pack, targets, step_mask
