"""The multi-timescale fusion network and snippet classifier.

Three TxD feature matrices (short / medium / long timescale) pass through
four stages: pairwise cross-attention fusion, dilated-conv local gating,
self-attention over a reduced concatenation, and a final fuse-and-residual
projection, followed by a per-snippet 3-layer classifier. Each stage can
be bypassed independently for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node, Tape

DEFAULT_DILATIONS = {"lm": 2, "ms": 1, "sl": 4}


@dataclass(frozen=True)
class ModelConfig:
    d: int
    t: int = 32
    heads: int = 4
    hidden: tuple[int, int] = (512, 128)
    dropout: float = 0.7
    dilations: dict = field(default_factory=lambda: dict(DEFAULT_DILATIONS))
    use_pfl: bool = True
    use_ltl: bool = True
    use_gtl: bool = True
    use_ff: bool = True

    def validate(self):
        if self.t < 2:
            raise ValueError(f"snippet count T must be >= 2, got {self.t}")
        if self.d % 2 != 0:
            raise ValueError(f"feature dimension D must be even, got {self.d}")
        if self.d % self.heads != 0:
            raise ValueError(f"D={self.d} not divisible by heads={self.heads}")
        if (self.d // 2) % self.heads != 0:
            raise ValueError(f"D/2={self.d // 2} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")
        if set(self.dilations) != {"lm", "ms", "sl"}:
            raise ValueError("dilations must map exactly {lm, ms, sl}")
        for pair, r in self.dilations.items():
            if r < 1:
                raise ValueError(f"dilation for {pair} must be >= 1, got {r}")
        return self


@dataclass
class MultiScaleFeatures:
    f_s: np.ndarray
    f_m: np.ndarray
    f_l: np.ndarray

    def validate(self):
        shape = self.f_s.shape
        for name, m in (("f_s", self.f_s), ("f_m", self.f_m), ("f_l", self.f_l)):
            if m.shape != shape:
                raise ValueError(f"{name} shape {m.shape} differs from {shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains non-finite values")
        return self


def _tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Shape of every learnable tensor under the given stage switches.

    Bias tensors end in "_b" (the optimizer exempts them from weight decay).
    """
    d = config.d
    h1, h2 = config.hidden
    shapes: dict[str, tuple[int, int]] = {}
    if config.use_pfl:
        for pair in ("lm", "ms", "sl"):
            for proj in ("q", "k", "v", "o"):
                shapes[f"pfl.{pair}.{proj}_w"] = (d, d)
                shapes[f"pfl.{pair}.{proj}_b"] = (1, d)
    if config.use_ltl:
        for pair in ("lm", "ms", "sl"):
            shapes[f"ltl.{pair}.conv_w"] = (d, 3)
            shapes[f"ltl.{pair}.conv_b"] = (1, d)
        shapes["ltl.proj_w"] = (d, d // 2)
        shapes["ltl.proj_b"] = (1, d // 2)
    if config.use_gtl:
        shapes["gtl.red_w"] = (3 * d, d // 2)
        shapes["gtl.red_b"] = (1, d // 2)
        for proj in ("q", "k", "v", "o"):
            shapes[f"gtl.msa.{proj}_w"] = (d // 2, d // 2)
            shapes[f"gtl.msa.{proj}_b"] = (1, d // 2)
    if config.use_ff:
        shapes["ff.proj_w"] = (d, d)
        shapes["ff.proj_b"] = (1, d)
    shapes["clf.fc1_w"] = (d, h1)
    shapes["clf.fc1_b"] = (1, h1)
    shapes["clf.fc2_w"] = (h1, h2)
    shapes["clf.fc2_b"] = (1, h2)
    shapes["clf.fc3_w"] = (h2, 1)
    shapes["clf.fc3_b"] = (1, 1)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(r * c for r, c in _tensor_shapes(config).values())


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, (rows, cols) in _tensor_shapes(config).items():
        if name.endswith("_b"):
            params[name] = np.zeros((rows, cols))
        else:
            bound = 1.0 / np.sqrt(rows)
            params[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return params


def _project(x: Node, leaves, prefix: str) -> Node:
    return dc.add_rowvec(dc.matmul(x, leaves[f"{prefix}_w"]), leaves[f"{prefix}_b"])


def cross_attention(q_src: Node, kv_src: Node, leaves, prefix: str,
                    heads: int) -> Node:
    """Multi-head cross-attention; self-attention when q_src is kv_src."""
    if q_src.shape != kv_src.shape:
        raise ValueError(
            f"attention source shapes differ: {q_src.shape} vs {kv_src.shape}")
    width = q_src.shape[1]
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    dh = width // heads
    q = _project(q_src, leaves, f"{prefix}.q")
    k = _project(kv_src, leaves, f"{prefix}.k")
    v = _project(kv_src, leaves, f"{prefix}.v")
    head_outs = []
    for h in range(heads):
        j0, j1 = h * dh, (h + 1) * dh
        qh = dc.slice_cols(q, j0, j1)
        kh = dc.slice_cols(k, j0, j1)
        vh = dc.slice_cols(v, j0, j1)
        kt = dc.matmul(qh, _transpose(kh))
        attn = dc.softmax_rows(dc.scale(kt, 1.0 / np.sqrt(dh)))
        head_outs.append(dc.matmul(attn, vh))
    merged = dc.concat_cols(head_outs) if heads > 1 else head_outs[0]
    return _project(merged, leaves, f"{prefix}.o")


def _transpose(n: Node) -> Node:
    x = n.value
    return n.tape._record(x.T.copy(), [(n, lambda g: g.T.copy())])


def attention_weights(q_src: np.ndarray, kv_src: np.ndarray, params,
                      prefix: str, heads: int) -> list[np.ndarray]:
    """The per-head softmax matrices, for invariant checks (rows sum to 1)."""
    q = q_src @ params[f"{prefix}.q_w"] + params[f"{prefix}.q_b"]
    k = kv_src @ params[f"{prefix}.k_w"] + params[f"{prefix}.k_b"]
    dh = q.shape[1] // heads
    out = []
    for h in range(heads):
        qh = q[:, h * dh:(h + 1) * dh]
        kh = k[:, h * dh:(h + 1) * dh]
        logits = qh @ kh.T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out.append(e / e.sum(axis=1, keepdims=True))
    return out


def pfl_forward(f_l: Node, f_m: Node, f_s: Node, leaves,
                config: ModelConfig) -> tuple[Node, Node, Node]:
    """Pairwise cross-attention fusion; identity pass-through when disabled."""
    if not config.use_pfl:
        return f_l, f_m, f_s
    f_lm = cross_attention(f_l, f_m, leaves, "pfl.lm", config.heads)
    f_ms = cross_attention(f_m, f_s, leaves, "pfl.ms", config.heads)
    f_sl = cross_attention(f_s, f_l, leaves, "pfl.sl", config.heads)
    return f_lm, f_ms, f_sl


def ltl_forward(f_lm: Node, f_ms: Node, f_sl: Node, leaves,
                config: ModelConfig) -> Node:
    """Sigmoid conv gates scale each pairwise matrix; sum projected to D/2."""
    scaled = []
    for name, p in (("lm", f_lm), ("ms", f_ms), ("sl", f_sl)):
        gate = dc.sigmoid(dc.dilated_conv1d_depthwise(
            p, leaves[f"ltl.{name}.conv_w"], leaves[f"ltl.{name}.conv_b"],
            config.dilations[name]))
        scaled.append(dc.hadamard(gate, p))
    total = dc.add(dc.add(scaled[0], scaled[1]), scaled[2])
    return dc.add_rowvec(dc.matmul(total, leaves["ltl.proj_w"]),
                         leaves["ltl.proj_b"])


def gtl_forward(f_l: Node, f_m: Node, f_s: Node, leaves,
                config: ModelConfig) -> Node:
    """Concat the three scales, reduce to D/2, self-attend over snippets."""
    c = dc.concat_cols([f_l, f_m, f_s])
    reduced = dc.add_rowvec(dc.matmul(c, leaves["gtl.red_w"]),
                            leaves["gtl.red_b"])
    return cross_attention(reduced, reduced, leaves, "gtl.msa", config.heads)


def ff_fuse(u_local: Node, u_global: Node, residual: Node, leaves,
            config: ModelConfig) -> Node:
    z = dc.concat_cols([u_local, u_global])
    projected = dc.add_rowvec(dc.matmul(z, leaves["ff.proj_w"]),
                              leaves["ff.proj_b"])
    return dc.add(projected, residual)


def _dropout(x: Node, rate: float, rng: np.random.Generator) -> Node:
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return dc.hadamard(x, x.tape.constant(mask))


def classify(x: Node, leaves, config: ModelConfig, mode: str = "eval",
             rng: np.random.Generator | None = None) -> Node:
    """Per-snippet scores in (0,1). Dropout only in train mode, from rng."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    if train and config.dropout > 0.0 and rng is None:
        raise ValueError("train-mode dropout requires an rng")
    h = dc.relu(_project(x, leaves, "clf.fc1"))
    if train:
        h = _dropout(h, config.dropout, rng)
    h = dc.relu(_project(h, leaves, "clf.fc2"))
    if train:
        h = _dropout(h, config.dropout, rng)
    return dc.sigmoid(_project(h, leaves, "clf.fc3"))


def build_forward(tape: Tape, leaves, msf: MultiScaleFeatures,
                  config: ModelConfig, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> tuple[Node, Node]:
    """Assemble the full network on `tape`; returns (fused X, snippet scores).

    Disabled stages are bypassed: PFL passes the scale matrices through;
    with LTL (resp. GTL) off, the other branch's output is duplicated to
    fill both halves of the fuse input; with both off, the fuse input is
    the mean of the pairwise matrices; with FF off, X is the raw TxD
    concatenation with no residual. All four off reduces to the mean of
    the input scales.
    """
    msf.validate()
    f_s = tape.constant(msf.f_s)
    f_m = tape.constant(msf.f_m)
    f_l = tape.constant(msf.f_l)

    f_lm, f_ms, f_sl = pfl_forward(f_l, f_m, f_s, leaves, config)
    u_local = ltl_forward(f_lm, f_ms, f_sl, leaves, config) if config.use_ltl else None
    u_global = gtl_forward(f_l, f_m, f_s, leaves, config) if config.use_gtl else None

    if u_local is None and u_global is None:
        pair_mean = dc.scale(dc.add(dc.add(f_lm, f_ms), f_sl), 1.0 / 3.0)
        halves = None
    elif u_local is None:
        halves = (u_global, u_global)
    elif u_global is None:
        halves = (u_local, u_local)
    else:
        halves = (u_local, u_global)

    if config.use_ff:
        residual = dc.scale(dc.add(dc.add(f_l, f_m), f_s), 1.0 / 3.0)
        if halves is None:
            x = dc.add(dc.add_rowvec(dc.matmul(pair_mean, leaves["ff.proj_w"]),
                                     leaves["ff.proj_b"]), residual)
        else:
            x = ff_fuse(halves[0], halves[1], residual, leaves, config)
    else:
        x = dc.concat_cols(list(halves)) if halves is not None else pair_mean

    scores = classify(x, leaves, config, mode=mode, rng=rng)
    return x, scores


def forward(msf: MultiScaleFeatures, params: dict[str, np.ndarray],
            config: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None):
    """Convenience wrapper building a private tape; returns (tape, X, scores)."""
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in params.items()}
    x, scores = build_forward(tape, leaves, msf, config, mode=mode, rng=rng)
    return tape, x, scores
