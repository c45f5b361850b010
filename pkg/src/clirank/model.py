"""The transformer reranker with a fixed translation attention head.

The encoder stack mixes standard multi-head self-attention layers with
mixed-attention layers: those add a second, parallel sublayer whose
attention weights come from the translation attention matrix instead of
learned query/key projections. Relevance is scored from the last layer's
[CLS] state through a linear head; two document segments are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attnmat import TranslationAttentionMatrix
from .textprep import TokenizedSequence


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``mat_layers`` holds 1-based indices of encoder layers that carry the
    translation attention sublayer. The stated architecture keeps the last
    layer vanilla; ``allow_last_mat`` lifts that check for ablations.
    """

    d: int
    n: int
    layers: int
    mat_layers: frozenset[int] = frozenset()
    ffn_hidden: int = 0
    max_len: int = 512
    vocab_size: int = 0
    dropout_rate: float = 0.1
    ln_eps: float = 1e-12
    precision: int = 32
    allow_last_mat: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mat_layers", frozenset(self.mat_layers))
        if self.layers < 1:
            raise ValueError("layer count must be >= 1")
        if self.d % self.n != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.n} heads")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be set")
        if self.ffn_hidden < 1:
            raise ValueError("ffn_hidden must be set")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        bad = [i for i in self.mat_layers if not 1 <= i <= self.layers]
        if bad:
            raise ValueError(f"mat_layers {sorted(bad)} outside 1..{self.layers}")
        if not self.allow_last_mat and self.layers in self.mat_layers:
            raise ValueError(
                f"layer {self.layers} is the output layer and stays vanilla "
                "(set allow_last_mat for ablations)"
            )

    @property
    def dtype(self) -> np.dtype:
        return T.FLOAT64 if self.precision == 64 else T.FLOAT32

    @property
    def head_dim(self) -> int:
        return self.d // self.n

    def to_text(self) -> str:
        mat = ",".join(str(i) for i in sorted(self.mat_layers))
        lines = [
            f"d = {self.d}",
            f"n = {self.n}",
            f"layers = {self.layers}",
            f"mat_layers = {mat}",
            f"ffn_hidden = {self.ffn_hidden}",
            f"max_len = {self.max_len}",
            f"vocab_size = {self.vocab_size}",
            f"dropout_rate = {self.dropout_rate!r}",
            f"ln_eps = {self.ln_eps!r}",
            f"precision = {self.precision}",
            f"allow_last_mat = {int(self.allow_last_mat)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        mat = frozenset(int(x) for x in kv["mat_layers"].split(",") if x)
        return cls(
            d=int(kv["d"]),
            n=int(kv["n"]),
            layers=int(kv["layers"]),
            mat_layers=mat,
            ffn_hidden=int(kv["ffn_hidden"]),
            max_len=int(kv["max_len"]),
            vocab_size=int(kv["vocab_size"]),
            dropout_rate=float(kv["dropout_rate"]),
            ln_eps=float(kv["ln_eps"]),
            precision=int(kv["precision"]),
            allow_last_mat=bool(int(kv.get("allow_last_mat", "0"))),
        )


@dataclass
class LayerParams:
    """One encoder layer: per-head attention projections, output
    projection, feed-forward, and two layer norms."""

    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    def head_projections(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The i-th head's (d/n x d) query/key/value matrices."""
        return self.wq.value[i], self.wk.value[i], self.wv.value[i]

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {
            f"{prefix}.mh.wq": self.wq,
            f"{prefix}.mh.wk": self.wk,
            f"{prefix}.mh.wv": self.wv,
            f"{prefix}.mh.wo": self.wo,
            f"{prefix}.ln1.g": self.ln1_g,
            f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ffn.w1": self.w1,
            f"{prefix}.ffn.b1": self.b1,
            f"{prefix}.ffn.w2": self.w2,
            f"{prefix}.ffn.b2": self.b2,
            f"{prefix}.ln2.g": self.ln2_g,
            f"{prefix}.ln2.b": self.ln2_b,
        }


@dataclass
class MatLayerParams(LayerParams):
    """Encoder layer extended with the translation attention sublayer:
    value/output projections of the fixed head plus its own layer norm."""

    th_wv: T.Tensor = None
    th_wo: T.Tensor = None
    th_ln_g: T.Tensor = None
    th_ln_b: T.Tensor = None

    @property
    def extra_weight_param_count(self) -> int:
        return self.th_wv.value.size + self.th_wo.value.size

    @property
    def extra_layer_norm_param_count(self) -> int:
        return self.th_ln_g.value.size + self.th_ln_b.value.size

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        out = super().named(prefix)
        out.update(
            {
                f"{prefix}.th.wv": self.th_wv,
                f"{prefix}.th.wo": self.th_wo,
                f"{prefix}.th.ln.g": self.th_ln_g,
                f"{prefix}.th.ln.b": self.th_ln_b,
            }
        )
        return out


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class MartModel:
    """Embedding tables, the encoder stack, and the scoring head."""

    def __init__(self, config: ModelConfig, tensors: dict[str, T.Tensor]):
        self.config = config
        self._tensors = tensors
        self.layers: list[LayerParams] = []
        for i in range(1, config.layers + 1):
            prefix = f"layer{i:02d}"
            kind = MatLayerParams if i in config.mat_layers else LayerParams
            kwargs = dict(
                wq=tensors[f"{prefix}.mh.wq"],
                wk=tensors[f"{prefix}.mh.wk"],
                wv=tensors[f"{prefix}.mh.wv"],
                wo=tensors[f"{prefix}.mh.wo"],
                ln1_g=tensors[f"{prefix}.ln1.g"],
                ln1_b=tensors[f"{prefix}.ln1.b"],
                w1=tensors[f"{prefix}.ffn.w1"],
                b1=tensors[f"{prefix}.ffn.b1"],
                w2=tensors[f"{prefix}.ffn.w2"],
                b2=tensors[f"{prefix}.ffn.b2"],
                ln2_g=tensors[f"{prefix}.ln2.g"],
                ln2_b=tensors[f"{prefix}.ln2.b"],
            )
            if kind is MatLayerParams:
                kwargs.update(
                    th_wv=tensors[f"{prefix}.th.wv"],
                    th_wo=tensors[f"{prefix}.th.wo"],
                    th_ln_g=tensors[f"{prefix}.th.ln.g"],
                    th_ln_b=tensors[f"{prefix}.th.ln.b"],
                )
            self.layers.append(kind(**kwargs))

    @property
    def tok_emb(self) -> T.Tensor:
        return self._tensors["emb.tok"]

    @property
    def pos_emb(self) -> T.Tensor:
        return self._tensors["emb.pos"]

    @property
    def seg_emb(self) -> T.Tensor:
        return self._tensors["emb.seg"]

    def parameters(self) -> dict[str, T.Tensor]:
        return dict(self._tensors)

    def layer_kinds(self) -> list[str]:
        return ["mat" if isinstance(l, MatLayerParams) else "vanilla" for l in self.layers]

    def forward_states(
        self,
        seq: TokenizedSequence,
        mtr: TranslationAttentionMatrix | np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> list[T.Tensor]:
        """Hidden states after the embedding block and after every layer."""
        cfg = self.config
        rate = cfg.dropout_rate if training else 0.0
        mtr_values = mtr.values if isinstance(mtr, TranslationAttentionMatrix) else mtr
        if mtr_values.shape != (seq.m, seq.m):
            raise ValueError(
                f"attention matrix shape {mtr_values.shape} does not match m={seq.m}"
            )
        mtr_t = T.constant(np.asarray(mtr_values, dtype=cfg.dtype))
        h = embed_input(seq, self, rate=rate, rng=rng)
        states = [h]
        for layer in self.layers:
            if isinstance(layer, MatLayerParams):
                h = mat_layer(h, mtr_t, layer, eps=cfg.ln_eps, rate=rate, rng=rng)
            else:
                h = vanilla_layer(h, layer, eps=cfg.ln_eps, rate=rate, rng=rng)
            states.append(h)
        return states

    def save(self, path: str | Path) -> None:
        """Tensor checkpoint plus a flat key-value config block alongside."""
        path = Path(path)
        T.save_checkpoint(path, self._tensors)
        path.with_name(path.name + ".cfg").write_text(self.config.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MartModel":
        path = Path(path)
        config = ModelConfig.from_text(
            path.with_name(path.name + ".cfg").read_text(encoding="utf-8")
        )
        arrays = T.load_checkpoint(path)
        tensors = {name: T.param(arr) for name, arr in arrays.items()}
        return cls(config, tensors)


def assemble_mart(config: ModelConfig, seed: int) -> MartModel:
    """Initialize a model: truncated normal (std 0.02) weights, zero
    biases, unit/zero layer-norm scales. Deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    d, ffn = config.d, config.ffn_hidden

    def w(shape):
        return T.param(truncated_normal(rng, shape).astype(dt))

    def zeros(shape):
        return T.param(np.zeros(shape, dtype=dt))

    def ones(shape):
        return T.param(np.ones(shape, dtype=dt))

    tensors: dict[str, T.Tensor] = {
        "emb.tok": w((config.vocab_size, d)),
        "emb.pos": w((config.max_len, d)),
        "emb.seg": w((2, d)),
        "emb.ln.g": ones(d),
        "emb.ln.b": zeros(d),
    }
    for i in range(1, config.layers + 1):
        prefix = f"layer{i:02d}"
        tensors[f"{prefix}.mh.wq"] = w((config.n, config.head_dim, d))
        tensors[f"{prefix}.mh.wk"] = w((config.n, config.head_dim, d))
        tensors[f"{prefix}.mh.wv"] = w((config.n, config.head_dim, d))
        tensors[f"{prefix}.mh.wo"] = w((d, d))
        tensors[f"{prefix}.ln1.g"] = ones(d)
        tensors[f"{prefix}.ln1.b"] = zeros(d)
        if i in config.mat_layers:
            tensors[f"{prefix}.th.wv"] = w((d, d))
            tensors[f"{prefix}.th.wo"] = w((d, d))
            tensors[f"{prefix}.th.ln.g"] = ones(d)
            tensors[f"{prefix}.th.ln.b"] = zeros(d)
        tensors[f"{prefix}.ffn.w1"] = w((d, ffn))
        tensors[f"{prefix}.ffn.b1"] = zeros(ffn)
        tensors[f"{prefix}.ffn.w2"] = w((ffn, d))
        tensors[f"{prefix}.ffn.b2"] = zeros(d)
        tensors[f"{prefix}.ln2.g"] = ones(d)
        tensors[f"{prefix}.ln2.b"] = zeros(d)
    tensors["head.w"] = w((1, d))
    tensors["head.b"] = zeros(1)
    return MartModel(config, tensors)


def init_from_base(mart: MartModel, base: MartModel) -> None:
    """Copy all shared tensors from a vanilla-stack model of the same
    configuration; the translation-head projections keep their fresh
    initialization."""
    if base.config.mat_layers:
        raise ValueError("base model must have no mixed-attention layers")
    want = ModelConfig(
        d=mart.config.d,
        n=mart.config.n,
        layers=mart.config.layers,
        mat_layers=frozenset(),
        ffn_hidden=mart.config.ffn_hidden,
        max_len=mart.config.max_len,
        vocab_size=mart.config.vocab_size,
        dropout_rate=mart.config.dropout_rate,
        ln_eps=mart.config.ln_eps,
        precision=mart.config.precision,
    )
    if base.config != want:
        raise ValueError("base configuration does not match (beyond mat_layers)")
    mart_tensors = mart.parameters()
    for name, tensor in base.parameters().items():
        mart_tensors[name].value[...] = tensor.value


def embed_input(
    seq: TokenizedSequence,
    model: MartModel,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Sum token, position, and segment embeddings, then layer norm."""
    cfg = model.config
    if seq.m > cfg.max_len:
        raise ValueError(f"sequence length {seq.m} exceeds max_len {cfg.max_len}")
    h = T.add(
        T.add(T.gather(model.tok_emb, seq.token_ids), T.gather(model.pos_emb, range(seq.m))),
        T.gather(model.seg_emb, seq.segment),
    )
    h = T.layer_norm(h, model._tensors["emb.ln.g"], model._tensors["emb.ln.b"], cfg.ln_eps)
    if rate > 0.0:
        h = T.dropout(h, rate, rng)
    return h


def multi_head_attention(h: T.Tensor, params: LayerParams) -> T.Tensor:
    """Scaled dot-product attention per head, concatenated and projected."""
    n, dh, _ = params.wq.shape
    hb = T.tile_batch(h, n)
    q = T.matmul(hb, params.wq, tb=True)
    k = T.matmul(hb, params.wk, tb=True)
    v = T.matmul(hb, params.wv, tb=True)
    attn = T.softmax_lastdim(T.matmul(q, k, tb=True), math.sqrt(dh))
    ctx = T.matmul(attn, v)
    return T.matmul(T.merge_heads(ctx), params.wo, tb=True)


def translation_head(h: T.Tensor, mtr: T.Tensor, params: MatLayerParams) -> T.Tensor:
    """The fixed attention head: project values, mix rows by the constant
    translation attention matrix, project out. No gradient reaches the
    matrix itself."""
    if mtr.shape != (h.shape[0], h.shape[0]):
        raise ValueError(f"matrix shape {mtr.shape} does not match m={h.shape[0]}")
    v = T.matmul(h, params.th_wv, tb=True)
    return T.matmul(T.matmul(mtr, v), params.th_wo, tb=True)


def _ffn(u: T.Tensor, params: LayerParams) -> T.Tensor:
    inner = T.relu(T.add(T.matmul(u, params.w1), params.b1))
    return T.add(T.matmul(inner, params.w2), params.b2)


def _maybe_drop(x: T.Tensor, rate: float, rng) -> T.Tensor:
    return T.dropout(x, rate, rng) if rate > 0.0 else x


def vanilla_layer(
    h: T.Tensor,
    params: LayerParams,
    eps: float = 1e-12,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """LN(h + attention) followed by LN(. + feed-forward)."""
    a = _maybe_drop(multi_head_attention(h, params), rate, rng)
    u = T.layer_norm(T.add(h, a), params.ln1_g, params.ln1_b, eps)
    f = _maybe_drop(_ffn(u, params), rate, rng)
    return T.layer_norm(T.add(u, f), params.ln2_g, params.ln2_b, eps)


def mat_layer(
    h: T.Tensor,
    mtr: T.Tensor,
    params: MatLayerParams,
    eps: float = 1e-12,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Sum of the two layer-normed attention sublayers, then feed-forward.

    The learned and the fixed attention head each get their own residual
    connection and layer norm; their outputs are added and flow through
    the shared feed-forward block with a final residual and norm.
    """
    a = _maybe_drop(multi_head_attention(h, params), rate, rng)
    s_mh = T.layer_norm(T.add(h, a), params.ln1_g, params.ln1_b, eps)
    t = _maybe_drop(translation_head(h, mtr, params), rate, rng)
    s_th = T.layer_norm(T.add(h, t), params.th_ln_g, params.th_ln_b, eps)
    u = T.add(s_mh, s_th)
    f = _maybe_drop(_ffn(u, params), rate, rng)
    return T.layer_norm(T.add(u, f), params.ln2_g, params.ln2_b, eps)


def score_last_int(
    model: MartModel,
    segments: Sequence[TokenizedSequence],
    mtrs: Sequence[TranslationAttentionMatrix | np.ndarray],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Relevance score from the last layer's [CLS] state.

    A document split into two segments runs through the stack twice (each
    with its own attention matrix) and the two [CLS] vectors are averaged
    before the linear head. Returns a 1x1 tensor.
    """
    if len(segments) != len(mtrs) or not 1 <= len(segments) <= 2:
        raise ValueError("need one or two segments, each with its attention matrix")
    cls_states = []
    for seq, mtr in zip(segments, mtrs):
        states = model.forward_states(seq, mtr, training=training, rng=rng)
        cls_states.append(T.slice_rows(states[-1], 0, 1))
    pooled = cls_states[0]
    if len(cls_states) == 2:
        pooled = T.scale(T.add(cls_states[0], cls_states[1]), 0.5)
    t = model._tensors
    return T.add(T.matmul(pooled, t["head.w"], tb=True), t["head.b"])
