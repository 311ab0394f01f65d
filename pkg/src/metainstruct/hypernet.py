"""Instruction-conditioned hypernetwork emitting gated rank-2 weight deltas.

An auxiliary encoder-decoder LM reads the instruction; its decoder is fed one
reserved index token per target matrix of the main LM, and the hidden state
at each index position goes through that matrix's own feed-forward head::

    h_n              = HNetLM(instruction, d_n)
    a, b, c, d, e    = FF_n(h_n)                 # a,b in R^m; c,d in R^n; e scalar
    delta W_n        = sigmoid(e) * (softmax(a) c^T + softmax(b) d^T)
    W_n(task)        = W_n + delta W_n
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Mapping

import numpy as np

from .gradcore import ParamRegistry, Tensor, ops
from .seq2seq import LayerAddress, ModelConfig, Seq2SeqLM, apply_delta, list_target_layers, matrix_shape
from .tokenizer import ByteTokenizer

HEADS = ("alpha", "beta", "gamma", "delta", "eta")


@dataclass
class HNetConfig:
    hidden_dim: int = 128
    selector: Literal["encoder", "decoder", "both"] = "decoder"
    use_index_tokens: bool = True
    state_mode: Literal["sequence", "last"] = "sequence"

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        if self.selector not in ("encoder", "decoder", "both"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.state_mode not in ("sequence", "last"):
            raise ValueError(f"unknown state_mode {self.state_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectionVectors:
    alpha: Tensor  # (m,)
    beta: Tensor   # (m,)
    gamma: Tensor  # (n,)
    delta: Tensor  # (n,)
    eta: Tensor    # (1,)


def make_delta(v: ProjectionVectors) -> Tensor:
    """sigmoid(eta) * (softmax(alpha) gamma^T + softmax(beta) delta^T), shape (m, n)."""
    rank1 = ops.outer(ops.softmax(v.alpha, axis=0), v.gamma)
    rank2 = ops.outer(ops.softmax(v.beta, axis=0), v.delta)
    return ops.reshape(ops.sigmoid(v.eta), (1, 1)) * (rank1 + rank2)


class HyperNetwork:
    """HNet-LM (prefix ``hnet.lm``) plus one FF head set per target matrix (``hnet.ff``)."""

    def __init__(self, main_config: ModelConfig, config: HNetConfig | None = None,
                 lm_config: ModelConfig | None = None, tokenizer: ByteTokenizer | None = None):
        self.main_config = main_config
        self.config = config or HNetConfig()
        self.tok = tokenizer or ByteTokenizer()
        self.lm = Seq2SeqLM(lm_config or main_config, prefix="hnet.lm", tokenizer=self.tok)
        self.targets: list[LayerAddress] = list_target_layers(main_config, self.config.selector)
        n = len(self.targets)
        if self.config.use_index_tokens and n > self.tok.n_index_tokens:
            raise ValueError(f"{n} target matrices but only {self.tok.n_index_tokens} index tokens")
        if n + 1 > self.lm.config.max_decoder_positions:
            raise ValueError("HNet decoder too short for the index sequence")
        self._target_set = set(self.targets)

    # -- parameters -------------------------------------------------------------------
    def ff_name(self, addr: LayerAddress, part: str) -> str:
        return f"hnet.ff.{addr}.{part}"

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParamRegistry:
        """Random HNet-LM and hidden layers; zero output heads so every delta starts at 0."""
        reg = self.lm.init_params(rng, dtype)
        d = self.lm.config.d_model
        hdim = self.config.hidden_dim
        for addr in self.targets:
            m, n = matrix_shape(self.main_config, addr)
            reg.register(self.ff_name(addr, "w1"),
                         Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (hdim, d)).astype(dtype)))
            reg.register(self.ff_name(addr, "b1"), Tensor(np.zeros(hdim, dtype=dtype)))
            for head, size in zip(HEADS, (m, m, n, n, 1)):
                reg.register(self.ff_name(addr, f"{head}.weight"), Tensor(np.zeros((size, hdim), dtype=dtype)))
                reg.register(self.ff_name(addr, f"{head}.bias"), Tensor(np.zeros(size, dtype=dtype)))
        return reg

    def head_param_count(self, addr: LayerAddress) -> int:
        """Number of output-head weights for one target (excluding biases)."""
        m, n = matrix_shape(self.main_config, addr)
        return (2 * m + 2 * n + 1) * self.config.hidden_dim

    # -- pipeline ---------------------------------------------------------------------
    def index_sequence(self) -> list[int]:
        n = len(self.targets)
        if self.config.use_index_tokens:
            return [self.tok.index_token(i) for i in range(n)]
        return [self.tok.index_token(0)] * n

    def encode_instruction(self, params: Mapping[str, Tensor], instruction: str) -> Tensor:
        """Hidden states (N, d_model), row ``n`` conditioning ``self.targets[n]``."""
        src = np.array([self.tok.encode(instruction) + [self.tok.EOS]], dtype=np.int64)
        tgt = np.array([[self.tok.BOS] + self.index_sequence()], dtype=np.int64)
        memory, mask = self.lm.encode(params, src)
        hidden = self.lm.decode_hidden(params, memory, mask, tgt)
        n = len(self.targets)
        if self.config.state_mode == "last":
            last = ops.reshape(hidden[0, n:n + 1, :], (1, -1))
            return ops.matmul(Tensor(np.ones((n, 1), dtype=last.dtype)), last)
        return hidden[0, 1:, :]

    def project(self, params: Mapping[str, Tensor], h: Tensor, addr: LayerAddress) -> ProjectionVectors:
        if addr not in self._target_set:
            raise KeyError(f"no projection head for layer {addr}")
        p = lambda part: params[self.ff_name(addr, part)]  # noqa: E731
        z = ops.tanh(ops.linear(h, p("w1"), p("b1")))
        outs = [ops.linear(z, p(f"{head}.weight"), p(f"{head}.bias")) for head in HEADS]
        return ProjectionVectors(*outs)

    def deltas(self, params: Mapping[str, Tensor], instruction: str) -> dict[LayerAddress, Tensor]:
        states = self.encode_instruction(params, instruction)
        return {addr: make_delta(self.project(params, states[i], addr))
                for i, addr in enumerate(self.targets)}

    def task_adapt(self, params: Mapping[str, Tensor], main_params: Mapping[str, Tensor],
                   instruction: str, prefix: str = "main") -> dict[str, Tensor]:
        """Task-specific main-LM parameter view for ``instruction``."""
        return apply_delta(main_params, self.deltas(params, instruction), prefix=prefix)
