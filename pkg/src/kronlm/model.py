"""Decoder-only tiny GPT whose linear and embedding sublayers are either
dense or Kronecker-factored, with forward passes that capture the per-layer
trace (embedding output, attention distributions, hidden states, logits)
needed for intermediate-layer distillation.

Compressed and uncompressed variants of the same config produce
identically-shaped traces, so teacher/student differences can be taken
directly without projections.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .errors import ShapeError
from .kronecker import KroneckerPair, nearest_kron
from .layers import (
    CompressionSchedule,
    DenseLinear,
    KroneckerEmbedding,
    KroneckerLinear,
    decompose_linear,
    param_count,
)
from .tensor_core import Rng, causal_mask

INIT_STD = 0.02


@dataclass
class GPTConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int | None = None  # defaults to 4 * d_model
    vocab_size: int = 256
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass.

    attentions[l] has shape (n_heads, T, T) with rows summing to 1 and exact
    zeros above the diagonal; hidden[l] is the block output (after the
    residual add by default).
    """

    embedding_out: np.ndarray  # (T, d)
    attentions: list = field(default_factory=list)  # N x (h, T, T)
    hidden: list = field(default_factory=list)  # N x (T, d)
    logits: np.ndarray | None = None  # (T, v)


@dataclass
class TraceNodes:
    """Tape handles mirroring ForwardTrace, for loss construction."""

    embedding: Node
    attn_scores: list  # raw per-head scores, for fused softmax+KL
    attn_probs: list
    hidden: list
    logits: Node
    final_hidden: Node = None  # post-final-layernorm features feeding the LM head

    def values(self) -> ForwardTrace:
        return ForwardTrace(
            embedding_out=self.embedding.value,
            attentions=[p.value for p in self.attn_probs],
            hidden=[h.value for h in self.hidden],
            logits=self.logits.value,
        )


@dataclass
class Block:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: DenseLinear | KroneckerLinear
    wk: DenseLinear | KroneckerLinear
    wv: DenseLinear | KroneckerLinear
    wo: DenseLinear | KroneckerLinear
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    c_fc: DenseLinear | KroneckerLinear
    c_proj: DenseLinear | KroneckerLinear


@dataclass
class ClassifierHead:
    """Last-token pooling followed by a dense projection to class logits."""

    projection: DenseLinear

    @property
    def n_classes(self) -> int:
        return self.projection.weight.shape[0]


def _linear_params(prefix: str, layer) -> list:
    if isinstance(layer, KroneckerLinear):
        out = [(f"{prefix}.a", layer.factors.a), (f"{prefix}.b", layer.factors.b)]
    else:
        out = [(f"{prefix}.weight", layer.weight)]
    if layer.bias is not None:
        out.append((f"{prefix}.bias", layer.bias))
    return out


class TinyGPTModel:
    def __init__(self, config: GPTConfig, tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, lm_head,
                 hidden_pre_residual: bool = False):
        self.config = config
        self.tok_emb = tok_emb  # (v, d) ndarray or KroneckerEmbedding
        self.pos_emb = pos_emb  # (max_seq_len, d)
        self.blocks = blocks
        self.lnf_gain = lnf_gain
        self.lnf_bias = lnf_bias
        self.lm_head = lm_head  # DenseLinear, never factored
        # hidden-state trace: block output after the residual add by default;
        # set True to record the FFN projection output instead
        self.hidden_pre_residual = hidden_pre_residual

    # ---- construction ----------------------------------------------------

    @classmethod
    def init_random(cls, config: GPTConfig, rng: Rng | None = None) -> "TinyGPTModel":
        if rng is None:
            rng = Rng(config.seed)
        d, dff, v = config.d_model, config.d_ff, config.vocab_size

        def lin(out_dim, in_dim, with_bias=True):
            return DenseLinear(
                weight=rng.normal(out_dim, in_dim, scale=INIT_STD),
                bias=np.zeros(out_dim) if with_bias else None,
            )

        blocks = [
            Block(
                ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
                wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d),
                ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
                c_fc=lin(dff, d), c_proj=lin(d, dff),
            )
            for _ in range(config.n_layers)
        ]
        return cls(
            config=config,
            tok_emb=rng.normal(v, d, scale=INIT_STD),
            pos_emb=rng.normal(config.max_seq_len, d, scale=INIT_STD),
            blocks=blocks,
            lnf_gain=np.ones(d),
            lnf_bias=np.zeros(d),
            lm_head=lin(v, d, with_bias=False),
        )

    def copy(self) -> "TinyGPTModel":
        def copy_lin(layer):
            bias = None if layer.bias is None else layer.bias.copy()
            if isinstance(layer, KroneckerLinear):
                return KroneckerLinear(
                    KroneckerPair(layer.factors.a.copy(), layer.factors.b.copy()), bias
                )
            return DenseLinear(layer.weight.copy(), bias)

        if isinstance(self.tok_emb, KroneckerEmbedding):
            tok = KroneckerEmbedding(self.tok_emb.a_e.copy(), self.tok_emb.b_e.copy())
        else:
            tok = self.tok_emb.copy()
        blocks = [
            Block(
                b.ln1_gain.copy(), b.ln1_bias.copy(),
                copy_lin(b.wq), copy_lin(b.wk), copy_lin(b.wv), copy_lin(b.wo),
                b.ln2_gain.copy(), b.ln2_bias.copy(),
                copy_lin(b.c_fc), copy_lin(b.c_proj),
            )
            for b in self.blocks
        ]
        return TinyGPTModel(
            self.config, tok, self.pos_emb.copy(), blocks,
            self.lnf_gain.copy(), self.lnf_bias.copy(), copy_lin(self.lm_head),
            hidden_pre_residual=self.hidden_pre_residual,
        )

    # ---- parameters --------------------------------------------------------

    def named_parameters(self) -> list:
        out = []
        if isinstance(self.tok_emb, KroneckerEmbedding):
            out += [("tok_emb.a", self.tok_emb.a_e), ("tok_emb.b", self.tok_emb.b_e)]
        else:
            out.append(("tok_emb.weight", self.tok_emb))
        out.append(("pos_emb.weight", self.pos_emb))
        for i, b in enumerate(self.blocks):
            p = f"block{i}"
            out += [(f"{p}.ln1.gain", b.ln1_gain), (f"{p}.ln1.bias", b.ln1_bias)]
            for role in ("wq", "wk", "wv", "wo"):
                out += _linear_params(f"{p}.{role}", getattr(b, role))
            out += [(f"{p}.ln2.gain", b.ln2_gain), (f"{p}.ln2.bias", b.ln2_bias)]
            out += _linear_params(f"{p}.c_fc", b.c_fc)
            out += _linear_params(f"{p}.c_proj", b.c_proj)
        out += [("ln_f.gain", self.lnf_gain), ("ln_f.bias", self.lnf_bias)]
        out += _linear_params("lm_head", self.lm_head)
        return out

    def param_count(self, exclude_lm_head: bool = False) -> int:
        total = param_count(self.pos_emb) + self.lnf_gain.size + self.lnf_bias.size
        total += param_count(self.tok_emb)
        for b in self.blocks:
            total += b.ln1_gain.size + b.ln1_bias.size + b.ln2_gain.size + b.ln2_bias.size
            for layer in (b.wq, b.wk, b.wv, b.wo, b.c_fc, b.c_proj):
                total += param_count(layer)
        if not exclude_lm_head:
            total += param_count(self.lm_head)
        return total

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # ---- forward -----------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 1:
            raise ShapeError(f"tokens must be a non-empty 1-D id sequence, got {tokens.shape}")
        if tokens.size > self.config.max_seq_len:
            raise ShapeError(
                f"sequence length {tokens.size} exceeds max_seq_len {self.config.max_seq_len}"
            )
        return tokens

    def forward_tape(self, tape: Tape, tokens, params: dict | None = None) -> TraceNodes:
        """Build the forward graph on ``tape``; returns trace handles.

        ``params`` maps parameter names to tape leaves; when omitted the
        current weights enter as constants (evaluation mode).
        """
        tokens = self._check_tokens(tokens)
        t = tokens.size
        cfg = self.config
        if params is None:
            params = {name: tape.constant(arr, name) for name, arr in self.named_parameters()}

        def apply_linear(prefix, layer, x):
            bias = params.get(f"{prefix}.bias") if layer.bias is not None else None
            if isinstance(layer, KroneckerLinear):
                return tape.kron_linear(x, params[f"{prefix}.a"], params[f"{prefix}.b"], bias)
            return tape.linear(x, params[f"{prefix}.weight"], bias)

        if isinstance(self.tok_emb, KroneckerEmbedding):
            tok = tape.kron_embed(params["tok_emb.a"], params["tok_emb.b"], tokens)
        else:
            tok = tape.gather_rows(params["tok_emb.weight"], tokens)
        pos = tape.gather_rows(params["pos_emb.weight"], np.arange(t))
        x = tape.add(tok, pos)
        embedding_node = x

        mask = causal_mask(t)
        scale = 1.0 / np.sqrt(cfg.d_model / cfg.n_heads)
        scores_nodes, probs_nodes, hidden_nodes = [], [], []
        for i, b in enumerate(self.blocks):
            p = f"block{i}"
            h0 = tape.layernorm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
            q = apply_linear(f"{p}.wq", b.wq, h0)
            k = apply_linear(f"{p}.wk", b.wk, h0)
            v = apply_linear(f"{p}.wv", b.wv, h0)
            scores = tape.attn_scores(q, k, cfg.n_heads, scale)
            probs = tape.masked_softmax(scores, mask)
            ctx = tape.attn_mix(probs, v, cfg.n_heads)
            x = tape.add(x, apply_linear(f"{p}.wo", b.wo, ctx))
            h1 = tape.layernorm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
            ff = apply_linear(f"{p}.c_proj", b.c_proj, tape.gelu(apply_linear(f"{p}.c_fc", b.c_fc, h1)))
            x = tape.add(x, ff)
            scores_nodes.append(scores)
            probs_nodes.append(probs)
            hidden_nodes.append(ff if self.hidden_pre_residual else x)

        xf = tape.layernorm(x, params["ln_f.gain"], params["ln_f.bias"])
        logits = apply_linear("lm_head", self.lm_head, xf)
        return TraceNodes(embedding_node, scores_nodes, probs_nodes, hidden_nodes, logits, xf)

    def forward(self, tokens) -> ForwardTrace:
        """Plain forward pass returning the full ILKD trace."""
        return self.forward_tape(Tape(), tokens).values()

    def greedy_generate(self, prompt, n_tokens: int) -> np.ndarray:
        """Greedy argmax continuation; smoke-test utility only."""
        ids = list(np.asarray(prompt, dtype=np.int64))
        for _ in range(n_tokens):
            window = ids[-self.config.max_seq_len:]
            trace = self.forward(np.array(window))
            ids.append(int(np.argmax(trace.logits[-1])))
        return np.array(ids, dtype=np.int64)


class ClassifierModel:
    """A TinyGPTModel with a last-token classification head."""

    def __init__(self, base: TinyGPTModel, head: ClassifierHead):
        self.base = base
        self.head = head

    def named_parameters(self) -> list:
        return self.base.named_parameters() + _linear_params("classifier", self.head.projection)

    def forward_tape(self, tape: Tape, tokens, params: dict | None = None):
        tokens = self.base._check_tokens(tokens)
        if params is None:
            params = {name: tape.constant(arr, name) for name, arr in self.named_parameters()}
        nodes = self.base.forward_tape(tape, tokens, params)
        pooled = tape.gather_rows(nodes.final_hidden, np.array([tokens.size - 1]))
        bias = params.get("classifier.bias") if self.head.projection.bias is not None else None
        class_logits = tape.linear(pooled, params["classifier.weight"], bias)
        return nodes, class_logits

    def forward(self, tokens):
        nodes, class_logits = self.forward_tape(Tape(), tokens)
        return nodes.values(), class_logits.value

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def attach_classifier(model: TinyGPTModel, n_classes: int, rng: Rng | None = None) -> ClassifierModel:
    """Wrap a model with a last-token classifier projection.

    Zero-initialized (uniform class logits) unless an rng is supplied.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    d = model.config.d_model
    weight = np.zeros((n_classes, d)) if rng is None else rng.normal(n_classes, d, scale=INIT_STD)
    head = ClassifierHead(DenseLinear(weight=weight, bias=np.zeros(n_classes)))
    return ClassifierModel(model, head)


# ---- compression -----------------------------------------------------------


def compress_model(
    teacher: TinyGPTModel, schedule: CompressionSchedule, rng: Rng | None = None
) -> tuple[TinyGPTModel, list]:
    """Kronecker-compress a dense model per the schedule.

    Selected blocks get their q/k/v (optionally wo) and both FFN projections
    replaced by nearest-Kronecker factors; the embedding table becomes a
    KroneckerEmbedding. Everything else (biases, layer norms, positions, the
    LM head, unselected blocks) is copied verbatim. Returns the student and a
    list of (tensor name, DecompositionReport).
    """
    if rng is None:
        rng = Rng(teacher.config.seed)
    student = teacher.copy()
    reports = []

    if schedule.compress_embedding:
        if isinstance(teacher.tok_emb, KroneckerEmbedding):
            raise ShapeError("compress_model expects a dense token embedding")
        v, d = teacher.tok_emb.shape
        try:
            pair, report = nearest_kron(teacher.tok_emb, *schedule.embedding_shapes(v, d), rng=rng)
        except Exception as exc:
            raise type(exc)(f"tok_emb: {exc}") from exc
        student.tok_emb = KroneckerEmbedding(a_e=pair.a, b_e=pair.b)
        reports.append(("tok_emb.weight", report))

    roles = ["wq", "wk", "wv", "c_fc", "c_proj"] + (["wo"] if schedule.include_wo else [])
    shape_for = {
        "wq": schedule.shape_qkv, "wk": schedule.shape_qkv, "wv": schedule.shape_qkv,
        "wo": schedule.shape_wo, "c_fc": schedule.shape_cfc, "c_proj": schedule.shape_cproj,
    }
    for i, block in enumerate(student.blocks):
        if not schedule.selects(i):
            continue
        for role in roles:
            layer = getattr(block, role)
            name = f"block{i}.{role}.weight"
            if not isinstance(layer, DenseLinear):
                raise ShapeError(f"{name}: compress_model expects dense teacher layers")
            try:
                factored, report = decompose_linear(layer, shape_for[role], rng=rng)
            except Exception as exc:
                raise type(exc)(f"{name}: {exc}") from exc
            setattr(block, role, factored)
            reports.append((name, report))
    return student, reports


def count_config_params(
    config: GPTConfig,
    schedule: CompressionSchedule | None = None,
    exclude_lm_head: bool = False,
) -> int:
    """Parameter count from shape arithmetic alone; no weights allocated."""
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def kron_params(shapes):
        m1, n1, m2, n2 = shapes
        return m1 * n1 + m2 * n2

    if schedule is not None and schedule.compress_embedding:
        total = kron_params(schedule.embedding_shapes(v, d))
    else:
        total = v * d
    total += config.max_seq_len * d  # positions
    for i in range(config.n_layers):
        total += 4 * d  # two layer norms
        selected = schedule is not None and schedule.selects(i)
        for role, (rows, cols) in (
            ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
            ("c_fc", (dff, d)), ("c_proj", (d, dff)),
        ):
            factored = selected and (role != "wo" or schedule.include_wo)
            if factored:
                shapes = {
                    "wq": schedule.shape_qkv, "wk": schedule.shape_qkv,
                    "wv": schedule.shape_qkv, "wo": schedule.shape_wo,
                    "c_fc": schedule.shape_cfc, "c_proj": schedule.shape_cproj,
                }[role]
                total += kron_params(shapes) + rows  # dense bias
            else:
                total += rows * cols + rows
    total += 2 * d  # final layer norm
    if not exclude_lm_head:
        total += v * d  # LM head (never compressed, no bias)
    return total
