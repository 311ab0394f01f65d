"""Small pre-LN encoder-decoder transformer over a functional parameter map.

All forward functions take the parameters as a ``Mapping[str, Tensor]`` so
the same code runs on a :class:`ParamRegistry`, a cloned registry (MAML inner
loops) or a task-specific view produced by :func:`apply_delta`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .gradcore import ContractError, DimensionError, ParamRegistry, Tensor, no_grad, ops
from .tokenizer import ByteTokenizer

NEG_INF = -1e9

ENCODER_MATRICES = (
    "self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.o_proj",
    "ff.fc1", "ff.fc2",
)
DECODER_MATRICES = (
    "self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.o_proj",
    "cross_attn.q_proj", "cross_attn.k_proj", "cross_attn.v_proj", "cross_attn.o_proj",
    "ff.fc1", "ff.fc2",
)


@dataclass
class ModelConfig:
    vocab_size: int = ByteTokenizer().vocab_size
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ff_dim: int = 256
    max_encoder_positions: int = 1024
    max_decoder_positions: int = 128
    # "absolute": one learned table over the whole source. "segment": positions
    # restart where the instance input begins, read from a second table, so an
    # input token's position does not depend on the instruction's length.
    encoder_positions: Literal["absolute", "segment"] = "absolute"

    def __post_init__(self):
        if self.encoder_positions not in ("absolute", "segment"):
            raise ValueError(f"encoder_positions must be absolute or segment, got {self.encoder_positions!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for f in ("vocab_size", "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers",
                  "ff_dim", "max_encoder_positions", "max_decoder_positions"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class LayerAddress:
    """One 2-D weight matrix inside a transformer layer."""

    stack: Literal["encoder", "decoder"]
    layer_index: int
    matrix_name: str

    def __str__(self) -> str:
        return f"{self.stack}.layer{self.layer_index}.{self.matrix_name}"

    def param_name(self, prefix: str = "main") -> str:
        return f"{prefix}.{self}.weight"

    @classmethod
    def parse(cls, text: str) -> "LayerAddress":
        stack, layer, matrix = text.split(".", 2)
        if stack not in ("encoder", "decoder") or not layer.startswith("layer"):
            raise ValueError(f"not a layer address: {text!r}")
        return cls(stack, int(layer[len("layer"):]), matrix)


def matrix_shape(config: ModelConfig, addr: LayerAddress) -> tuple[int, int]:
    """(out, in) shape of the matrix at ``addr``."""
    d, f = config.d_model, config.ff_dim
    if addr.matrix_name == "ff.fc1":
        return (f, d)
    if addr.matrix_name == "ff.fc2":
        return (d, f)
    return (d, d)


def list_target_layers(config: ModelConfig,
                       selector: Literal["encoder", "decoder", "both"] = "decoder") -> list[LayerAddress]:
    if selector not in ("encoder", "decoder", "both"):
        raise ValueError(f"selector must be encoder, decoder or both, got {selector!r}")
    out: list[LayerAddress] = []
    if selector in ("encoder", "both"):
        for i in range(config.n_encoder_layers):
            out.extend(LayerAddress("encoder", i, m) for m in ENCODER_MATRICES)
    if selector in ("decoder", "both"):
        for i in range(config.n_decoder_layers):
            out.extend(LayerAddress("decoder", i, m) for m in DECODER_MATRICES)
    return out


def init_params(config: ModelConfig, rng: np.random.Generator, prefix: str = "main",
                dtype=np.float32, registry: ParamRegistry | None = None) -> ParamRegistry:
    reg = registry if registry is not None else ParamRegistry()
    d, f = config.d_model, config.ff_dim

    def add(name, arr):
        reg.register(f"{prefix}.{name}", Tensor(np.asarray(arr, dtype=dtype)))

    # The table is read scaled by sqrt(d) on input and 1/sqrt(d) on output, so
    # the residual stream starts at unit scale and initial logits stay small.
    add("embed.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab_size, d)))
    add("encoder.pos", rng.normal(0.0, 1.0, (config.max_encoder_positions, d)))
    if config.encoder_positions == "segment":
        add("encoder.input_pos", rng.normal(0.0, 1.0, (config.max_encoder_positions, d)))
    add("decoder.pos", rng.normal(0.0, 1.0, (config.max_decoder_positions, d)))
    for stack, n_layers, mats, n_norms in (
        ("encoder", config.n_encoder_layers, ENCODER_MATRICES, 2),
        ("decoder", config.n_decoder_layers, DECODER_MATRICES, 3),
    ):
        for i in range(n_layers):
            for m in mats:
                shape = matrix_shape(config, LayerAddress(stack, i, m))
                add(f"{stack}.layer{i}.{m}.weight", rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape))
                add(f"{stack}.layer{i}.{m}.bias", np.zeros(shape[0]))
            for j in range(1, n_norms + 1):
                add(f"{stack}.layer{i}.ln{j}.gain", np.ones(d))
                add(f"{stack}.layer{i}.ln{j}.bias", np.zeros(d))
        add(f"{stack}.ln_final.gain", np.ones(d))
        add(f"{stack}.ln_final.bias", np.zeros(d))
    return reg


def apply_delta(base: Mapping[str, Tensor], delta: Mapping, prefix: str = "main") -> dict[str, Tensor]:
    """Task-specific view: keyed matrices become ``base + delta``, the rest are shared.

    ``base`` is never written; the sums stay on the tape so gradients reach
    both the base matrices and the deltas.
    """
    view = dict(base)
    for key, d in delta.items():
        name = key.param_name(prefix) if isinstance(key, LayerAddress) else key
        if name not in view:
            raise KeyError(f"delta targets unknown parameter {name!r}")
        w = view[name]
        if tuple(d.shape) != tuple(w.shape):
            raise DimensionError(f"delta for {name} has shape {d.shape}, parameter is {w.shape}")
        view[name] = ops.add(w, d)
    return view


@dataclass
class Batch:
    src: np.ndarray      # (B, S) encoder ids, PAD-padded
    tgt_in: np.ndarray   # (B, T) BOS + prefix + output
    tgt_out: np.ndarray  # (B, T) next tokens; prefix and padding set to IGNORE
    src_starts: np.ndarray | None = None  # (B,) index where each row's instance input begins

    IGNORE = -100

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_ids(seqs: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(tok: ByteTokenizer, encoder_texts: Sequence[str], outputs: Sequence[str],
               decoder_prefix: str, input_starts: Sequence[int] | None = None) -> Batch:
    prefix = tok.encode(decoder_prefix)
    src = [tok.encode(t) for t in encoder_texts]
    tin, tout = [], []
    for o in outputs:
        ids = tok.encode(o)
        tin.append([tok.BOS] + prefix + ids)
        tout.append([Batch.IGNORE] * len(prefix) + ids + [tok.EOS])
    starts = None if input_starts is None else np.asarray(input_starts, dtype=np.int64)
    return Batch(pad_ids(src, tok.PAD), pad_ids(tin, tok.PAD), pad_ids(tout, Batch.IGNORE), starts)


class Seq2SeqLM:
    """Encoder-decoder LM whose parameters live under ``prefix``."""

    def __init__(self, config: ModelConfig, prefix: str = "main", tokenizer: ByteTokenizer | None = None):
        self.config = config
        self.prefix = prefix
        self.tok = tokenizer or ByteTokenizer()
        if self.tok.vocab_size > config.vocab_size:
            raise ValueError(f"vocab_size {config.vocab_size} smaller than tokenizer's {self.tok.vocab_size}")

    def init_params(self, rng: np.random.Generator, dtype=np.float32,
                    registry: ParamRegistry | None = None) -> ParamRegistry:
        return init_params(self.config, rng, self.prefix, dtype, registry)

    def param_names(self) -> list[str]:
        return list(init_params(self.config, np.random.default_rng(0), self.prefix, np.float32))

    # -- building blocks ----------------------------------------------------------
    def _p(self, params, name):
        return params[f"{self.prefix}.{name}"]

    def _linear(self, params, name, x):
        return ops.linear(x, self._p(params, name + ".weight"), self._p(params, name + ".bias"))

    def _ln(self, params, name, x):
        return ops.layer_norm(x, self._p(params, name + ".gain"), self._p(params, name + ".bias"))

    def _attention(self, params, name, xq, xkv, mask):
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h
        q = self._linear(params, name + ".q_proj", xq).reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(params, name + ".k_proj", xkv).reshape(b, tk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(params, name + ".v_proj", xkv).reshape(b, tk, h, dh).transpose(0, 2, 1, 3)
        scores = ops.matmul(q, k) * (1.0 / math.sqrt(dh)) + mask
        ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self._linear(params, name + ".o_proj", ctx)

    def _ff(self, params, name, x):
        return self._linear(params, name + ".fc2", ops.gelu(self._linear(params, name + ".fc1", x)))

    def _embed(self, params, ids, stack, starts=None):
        scale = math.sqrt(self.config.d_model)
        tokens = ops.embedding(self._p(params, "embed.weight"), ids) * scale
        if stack == "encoder" and self.config.encoder_positions == "segment":
            return tokens + self._segment_positions(params, ids, starts)
        return tokens + self._p(params, f"{stack}.pos")[: ids.shape[1]]

    def _segment_positions(self, params, ids, starts):
        b, t = ids.shape
        starts = np.zeros(b, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64)
        if starts.shape != (b,) or np.any(starts < 0) or np.any(starts > t):
            raise ContractError(f"input starts {starts} do not fit a source of shape {ids.shape}")
        idx = np.arange(t)[None, :]
        in_input = idx >= starts[:, None]
        rows = np.where(in_input, idx - starts[:, None], idx)
        # both tables are gathered for every slot and the unused one is masked out
        instr = ops.embedding(self._p(params, "encoder.pos"), rows)
        inp = ops.embedding(self._p(params, "encoder.input_pos"), rows)
        mask = in_input[..., None].astype(instr.dtype)
        return instr * (1.0 - mask) + inp * mask

    # -- forward passes ---------------------------------------------------------------
    def encode(self, params, src: np.ndarray, starts=None):
        """Encoder states and the additive key mask for cross attention.

        ``starts`` gives, per row, the index where the instance input begins;
        only the segment position mode reads it (missing means 0).
        """
        src = np.asarray(src)
        if src.shape[1] > self.config.max_encoder_positions:
            raise ContractError(f"encoder input length {src.shape[1]} exceeds "
                                f"{self.config.max_encoder_positions}; filter upstream")
        dtype = self._p(params, "embed.weight").dtype
        key_mask = np.where(src == self.tok.PAD, NEG_INF, 0.0).astype(dtype)[:, None, None, :]
        x = self._embed(params, src, "encoder", starts)
        for i in range(self.config.n_encoder_layers):
            pre = f"encoder.layer{i}"
            h = self._ln(params, pre + ".ln1", x)
            x = x + self._attention(params, pre + ".self_attn", h, h, key_mask)
            x = x + self._ff(params, pre + ".ff", self._ln(params, pre + ".ln2", x))
        return self._ln(params, "encoder.ln_final", x), key_mask

    def decode_hidden(self, params, memory, memory_mask, tgt: np.ndarray) -> Tensor:
        """Final-layer decoder states (after the closing layer norm)."""
        tgt = np.asarray(tgt)
        t = tgt.shape[1]
        if t > self.config.max_decoder_positions:
            raise ContractError(f"decoder input length {t} exceeds "
                                f"{self.config.max_decoder_positions}; filter upstream")
        dtype = memory.dtype
        causal = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)
        pad = np.where(tgt == self.tok.PAD, NEG_INF, 0.0).astype(dtype)[:, None, None, :]
        self_mask = causal[None, None] + pad
        y = self._embed(params, tgt, "decoder")
        for i in range(self.config.n_decoder_layers):
            pre = f"decoder.layer{i}"
            h = self._ln(params, pre + ".ln1", y)
            y = y + self._attention(params, pre + ".self_attn", h, h, self_mask)
            y = y + self._attention(params, pre + ".cross_attn", self._ln(params, pre + ".ln2", y),
                                    memory, memory_mask)
            y = y + self._ff(params, pre + ".ff", self._ln(params, pre + ".ln3", y))
        return self._ln(params, "decoder.ln_final", y)

    def logits_from_hidden(self, params, hidden: Tensor) -> Tensor:
        emb = self._p(params, "embed.weight")
        return ops.matmul(hidden, emb.transpose()) * (1.0 / math.sqrt(self.config.d_model))

    def forward(self, params, src: np.ndarray, tgt: np.ndarray, starts=None) -> Tensor:
        """Logits of shape (batch, tgt_len, vocab)."""
        memory, mask = self.encode(params, src, starts)
        return self.logits_from_hidden(params, self.decode_hidden(params, memory, mask, tgt))

    def loss(self, params, batch: Batch) -> Tensor:
        """Mean teacher-forced cross entropy over the output tokens of the batch."""
        logits = self.forward(params, batch.src, batch.tgt_in, batch.src_starts)
        return ops.cross_entropy(logits, batch.tgt_out, ignore_index=Batch.IGNORE)

    def sequence_losses(self, params, batch: Batch) -> np.ndarray:
        """Per-example mean token loss, no tape."""
        with no_grad():
            logits = self.forward(params, batch.src, batch.tgt_in, batch.src_starts)
            per = ops.cross_entropy(logits, batch.tgt_out, ignore_index=Batch.IGNORE,
                                    reduction="none").data
        counts = np.maximum((batch.tgt_out != Batch.IGNORE).sum(axis=1), 1)
        return per.sum(axis=1) / counts

    def greedy_decode(self, params, src: np.ndarray, decoder_prefix: Sequence[int],
                      max_len: int, starts=None) -> list[list[int]]:
        """Argmax decoding per row of ``src``.

        ``max_len`` bounds prefix plus generated tokens; decoding stops at EOS.
        Returned sequences exclude the prefix and the EOS token.
        """
        src = np.atleast_2d(np.asarray(src))
        prefix = list(decoder_prefix)
        if len(prefix) >= max_len:
            raise ContractError(f"prefix length {len(prefix)} must be below max_len {max_len}")
        budget = min(max_len, self.config.max_decoder_positions - 1) - len(prefix)
        n = src.shape[0]
        outs: list[list[int]] = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        with no_grad():
            memory, mask = self.encode(params, src, starts)
            cur = np.array([[self.tok.BOS] + prefix] * n, dtype=np.int64)
            for _ in range(max(budget, 0)):
                hidden = self.decode_hidden(params, memory, mask, cur)
                last = self.logits_from_hidden(params, hidden[:, -1:, :]).data[:, 0, :]
                nxt = last.argmax(axis=-1)
                for i in range(n):
                    if done[i]:
                        continue
                    if nxt[i] == self.tok.EOS:
                        done[i] = True
                    else:
                        outs[i].append(int(nxt[i]))
                if done.all():
                    break
                nxt = np.where(done, self.tok.PAD, nxt)
                cur = np.concatenate([cur, nxt[:, None]], axis=1)
        return outs
