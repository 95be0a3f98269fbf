"""Transformer encoder-decoder with learnable proposals for span grounding.

Video frame features and query features are projected to ``d_model``,
concatenated and contextualized by the encoder. The decoder turns
``proposals_per_query * K`` learnable proposal embeddings into output
embeddings; a shared two-layer head maps each to a span and a cosine
correspondence against the encoded query rows links it to a query.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_in: int = 32
    d_model: int = 512
    n_heads: int | None = None
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    ffn_width: int | None = None
    proposals_per_query: int = 10
    max_queries: int = 4
    frame_count: int = 64
    dropout: float = 0.1
    temperature: float = 0.07
    correspondence: str = "cosine"
    video_pe: bool = True
    text_pe: bool = True

    def __post_init__(self):
        if self.n_heads is None:
            self.n_heads = max(1, self.d_model // 64)
        if self.ffn_width is None:
            self.ffn_width = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.proposals_per_query < 1:
            raise ConfigError("proposals_per_query must be >= 1")
        if self.max_queries < 1 or self.frame_count < 1:
            raise ConfigError("max_queries and frame_count must be positive")
        if self.correspondence not in ("cosine", "dot", "attention"):
            raise ConfigError(f"unknown correspondence measure {self.correspondence!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def max_proposals(self) -> int:
        return self.proposals_per_query * self.max_queries

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def desk_config(**overrides) -> ModelConfig:
    """The small configuration used for CPU training runs."""
    base = dict(d_model=128, n_heads=4, n_enc_layers=2, n_dec_layers=2, ffn_width=256)
    base.update(overrides)
    return ModelConfig(**base)


def sinusoid_table(n: int, d: int, base: float = 10000.0, cos_first: bool = False) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2 + d % 2, dtype=np.float64)[None, :]
    angle = pos / base ** (2.0 * i / d)
    first, second = (np.cos, np.sin) if cos_first else (np.sin, np.cos)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = first(angle)[:, : (d + 1) // 2]
    table[:, 1::2] = second(angle)[:, : d // 2]
    return table


@dataclass
class PositionalEncoding:
    """Two independent fixed tables, one per modality."""

    video_pe: np.ndarray
    text_pe: np.ndarray

    @classmethod
    def build(cls, cfg: ModelConfig) -> "PositionalEncoding":
        video = sinusoid_table(cfg.frame_count, cfg.d_model, 10000.0)
        text = sinusoid_table(cfg.max_queries, cfg.d_model, 1000.0, cos_first=True)
        if not cfg.video_pe:
            video = np.zeros_like(video)
        if not cfg.text_pe:
            text = np.zeros_like(text)
        return cls(video, text)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def xavier_init(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Named initial parameter arrays: Xavier-uniform weights, zero biases,
    unit layer-norm gains, proposals from N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    D, F = cfg.d_model, cfg.ffn_width
    p: dict[str, np.ndarray] = {}

    def lin(name, fi, fo):
        p[f"{name}.w"] = _xavier(rng, fi, fo)
        p[f"{name}.b"] = np.zeros(fo)

    def norm(name):
        p[f"{name}.g"] = np.ones(D)
        p[f"{name}.b"] = np.zeros(D)

    def attn(name):
        for part in ("q", "k", "v", "o"):
            lin(f"{name}.{part}", D, D)

    lin("video_proj", cfg.d_in, D)
    lin("text_proj", cfg.d_in, D)
    for l in range(cfg.n_enc_layers):
        attn(f"enc.{l}.self")
        norm(f"enc.{l}.norm1")
        lin(f"enc.{l}.ff1", D, F)
        lin(f"enc.{l}.ff2", F, D)
        norm(f"enc.{l}.norm2")
    for l in range(cfg.n_dec_layers):
        attn(f"dec.{l}.self")
        norm(f"dec.{l}.norm1")
        attn(f"dec.{l}.cross")
        norm(f"dec.{l}.norm2")
        lin(f"dec.{l}.ff1", D, F)
        lin(f"dec.{l}.ff2", F, D)
        norm(f"dec.{l}.norm3")
    norm("dec_norm")
    lin("head.1", D, D)
    lin("head.2", D, 2)
    p["proposals"] = rng.standard_normal((cfg.max_proposals, D)) * 0.02
    return p


@dataclass
class Batch:
    frames: np.ndarray          # (B, T, d_in)
    queries: np.ndarray         # (B, Kb, d_in), zero rows past n_queries
    n_queries: np.ndarray       # (B,)

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    @property
    def max_k(self) -> int:
        return self.queries.shape[1]

    @property
    def query_pad(self) -> np.ndarray:
        return np.arange(self.max_k)[None, :] >= self.n_queries[:, None]


def collate(samples, pad_to: int | None = None) -> Batch:
    """Zero-pad query rows of several samples to the largest K in the group."""
    ks = np.asarray([s.queries.shape[0] for s in samples], dtype=np.int64)
    kb = int(max(ks.max(), pad_to or 0))
    d_in = samples[0].queries.shape[1]
    frames = np.stack([s.frames for s in samples])
    queries = np.zeros((len(samples), kb, d_in))
    for b, s in enumerate(samples):
        queries[b, : ks[b]] = s.queries
    return Batch(frames, queries, ks)


@dataclass
class LayerOutput:
    span_s: Tensor          # (B, N)
    span_e: Tensor          # (B, N)
    correspondence: Tensor  # (B, N, Kb)


@dataclass
class ModelOutput:
    """Batched predictions.

    ``n_proposals[b]`` proposals and ``n_queries[b]`` queries are real for
    sample b; the rest of each axis is padding.
    """

    span_s: Tensor
    span_e: Tensor
    correspondence: Tensor
    n_queries: np.ndarray
    n_proposals: np.ndarray
    proposals_per_query: int
    aux_outputs: list[LayerOutput] = field(default_factory=list)
    enc_dec_attention: list[np.ndarray] = field(default_factory=list)

    @property
    def layers(self) -> list[LayerOutput]:
        """Auxiliary layers first, final layer last."""
        return [*self.aux_outputs, LayerOutput(self.span_s, self.span_e, self.correspondence)]

    def spans(self, b: int) -> np.ndarray:
        n = int(self.n_proposals[b])
        return np.stack([self.span_s.data[b, :n], self.span_e.data[b, :n]], axis=1)

    def probs(self, b: int) -> np.ndarray:
        n, k = int(self.n_proposals[b]), int(self.n_queries[b])
        return self.correspondence.data[b, :n, :k]

    def attention(self, b: int, layer: int = -1) -> np.ndarray:
        n, k = int(self.n_proposals[b]), int(self.n_queries[b])
        t = self.enc_dec_attention[layer].shape[2] - self.correspondence.shape[2]
        return self.enc_dec_attention[layer][b, :n, : t + k]


class VidGTR:
    """Transformer grounding model holding its parameters as autodiff leaves."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        arrays = params if params is not None else xavier_init(cfg, seed)
        self.params: dict[str, Tensor] = {
            k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()
        }
        self.pe = PositionalEncoding.build(cfg)
        self.training = False
        self.rng = np.random.default_rng(seed + 7919)

    # ----------------------------------------------------------- parameters

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> "VidGTR":
        self.training = mode
        return self

    def eval(self) -> "VidGTR":
        return self.train(False)

    # ----------------------------------------------------------- building blocks

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, self.rng, self.training)

    def _attention(self, name: str, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                   key_pad: np.ndarray) -> tuple[Tensor, Tensor]:
        B, Lq, D = q_in.shape
        Lk = k_in.shape[1]
        H = self.cfg.n_heads
        dh = D // H
        q = self._lin(f"{name}.q", q_in).reshape(B, Lq, H, dh).transpose(0, 2, 1, 3)
        k = self._lin(f"{name}.k", k_in).reshape(B, Lk, H, dh).transpose(0, 2, 3, 1)
        v = self._lin(f"{name}.v", v_in).reshape(B, Lk, H, dh).transpose(0, 2, 1, 3)
        scores = ad.matmul(q, k)
        attn = ad.softmax(scores, axis=-1, mask=key_pad[:, None, None, :], scale=1.0 / math.sqrt(dh))
        out = ad.matmul(self._drop(attn), v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self._lin(f"{name}.o", out), attn

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        h = self._drop(ad.relu(self._lin(f"{name}.ff1", x)))
        return self._lin(f"{name}.ff2", h)

    # ----------------------------------------------------------- forward

    def _check(self, batch: Batch) -> None:
        T = batch.frames.shape[1]
        if T != self.cfg.frame_count:
            raise ConfigError(f"expected {self.cfg.frame_count} frames, got {T}")
        if batch.max_k > self.cfg.max_queries:
            raise ConfigError(f"{batch.max_k} queries exceed max_queries={self.cfg.max_queries}")
        if batch.frames.shape[2] != self.cfg.d_in or batch.queries.shape[2] != self.cfg.d_in:
            raise ConfigError(f"feature width must be d_in={self.cfg.d_in}")

    def memory_pos(self, T: int, kb: int) -> np.ndarray:
        return np.concatenate([self.pe.video_pe[:T], self.pe.text_pe[:kb]], axis=0)

    def encode(self, batch: Batch) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Returns memory (B, T+Kb, D), its positional table and key padding mask."""
        self._check(batch)
        B, T, _ = batch.frames.shape
        kb = batch.max_k
        vid = self._lin("video_proj", Tensor(batch.frames))
        txt = self._lin("text_proj", Tensor(batch.queries))
        src = ad.concat([vid, txt], axis=1)
        pos = self.memory_pos(T, kb)
        pad = np.concatenate([np.zeros((B, T), dtype=bool), batch.query_pad], axis=1)
        for l in range(self.cfg.n_enc_layers):
            qk = src + pos
            sa, _ = self._attention(f"enc.{l}.self", qk, qk, src, pad)
            src = self._norm(f"enc.{l}.norm1", src + self._drop(sa))
            src = self._norm(f"enc.{l}.norm2", src + self._drop(self._ffn(f"enc.{l}", src)))
        return src, pos, pad

    def _correspondence(self, hs: Tensor, text_mem: Tensor, query_pad: np.ndarray,
                        cross_attn: Tensor, T: int) -> Tensor:
        mode = self.cfg.correspondence
        mask = query_pad[:, None, :]
        if mode == "attention":
            # head-averaged encoder-decoder attention mass on each query row
            mass = cross_attn.mean(axis=1)[:, :, T:]
            # padded query keys already receive exactly zero attention
            return mass / (mass.sum(axis=-1, keepdims=True) + 1e-12)
        if mode == "cosine":
            return ad.softmax(ad.cosine_similarity(hs, text_mem), axis=-1, mask=mask,
                              scale=1.0 / self.cfg.temperature)
        logits = ad.matmul(hs, text_mem.transpose(0, 2, 1))
        return ad.softmax(logits, axis=-1, mask=mask, scale=1.0 / math.sqrt(self.cfg.d_model))

    def _head(self, hs: Tensor) -> tuple[Tensor, Tensor]:
        raw = ad.sigmoid(self._lin("head.2", ad.relu(self._lin("head.1", hs))))
        a, b = raw[..., 0], raw[..., 1]
        return ad.minimum(a, b), ad.maximum(a, b)

    def decode(self, memory: Tensor, pos: np.ndarray, mem_pad: np.ndarray,
               n_queries: np.ndarray) -> ModelOutput:
        B, L, D = memory.shape
        kb = L - self.cfg.frame_count
        if kb > self.cfg.max_queries:
            raise ConfigError(f"{kb} queries exceed max_queries={self.cfg.max_queries}")
        T = L - kb
        ppq = self.cfg.proposals_per_query
        n_prop = ppq * np.asarray(n_queries, dtype=np.int64)
        N = ppq * kb
        prop_pad = np.arange(N)[None, :] >= n_prop[:, None]
        query_pad = mem_pad[:, T:]
        qpos = ad.expand(self.params["proposals"][:N], (B, N, D))
        tgt = qpos
        text_mem = memory[:, T:, :]
        mem_k = memory + pos
        layers: list[LayerOutput] = []
        attn_maps: list[np.ndarray] = []
        for l in range(self.cfg.n_dec_layers):
            q = tgt + qpos
            sa, _ = self._attention(f"dec.{l}.self", q, q, tgt, prop_pad)
            tgt = self._norm(f"dec.{l}.norm1", tgt + self._drop(sa))
            ca, cross = self._attention(f"dec.{l}.cross", tgt + qpos, mem_k, memory, mem_pad)
            tgt = self._norm(f"dec.{l}.norm2", tgt + self._drop(ca))
            tgt = self._norm(f"dec.{l}.norm3", tgt + self._drop(self._ffn(f"dec.{l}", tgt)))
            hs = self._norm("dec_norm", tgt)
            s, e = self._head(hs)
            corr = self._correspondence(hs, text_mem, query_pad, cross, T)
            layers.append(LayerOutput(s, e, corr))
            attn_maps.append(cross.data.mean(axis=1))
        if not layers:
            raise ConfigError("n_dec_layers must be >= 1")
        last = layers[-1]
        return ModelOutput(
            span_s=last.span_s,
            span_e=last.span_e,
            correspondence=last.correspondence,
            n_queries=np.asarray(n_queries, dtype=np.int64),
            n_proposals=n_prop,
            proposals_per_query=ppq,
            aux_outputs=layers[:-1],
            enc_dec_attention=attn_maps,
        )

    def forward(self, batch: Batch) -> ModelOutput:
        memory, pos, pad = self.encode(batch)
        return self.decode(memory, pos, pad, batch.n_queries)

    __call__ = forward

    def predict(self, samples, batch_size: int = 32) -> list[ModelOutput]:
        """Inference in eval mode without graph recording, one output per chunk."""
        was = self.training
        self.eval()
        outs = []
        try:
            with ad.no_grad():
                for i in range(0, len(samples), batch_size):
                    outs.append(self.forward(collate(samples[i : i + batch_size])))
        finally:
            self.training = was
        return outs
