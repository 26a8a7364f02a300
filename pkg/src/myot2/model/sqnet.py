"""Desk-scale dual-task network: CNN segmentation branch, Transformer
quantification branch, three coupling stages, two decoders.

Parameter names are hierarchical (``cnn.1.b0.down.w``) and every tensor is
created up front, including those of an ablated branch, so checkpoints of
ablated and full models share one layout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from ..autodiff import ParamStore, Tensor, ops

ABLATIONS = ("full", "seg_only", "quant_only")


@dataclass(frozen=True)
class ModelConfig:
    side: int = 64
    in_channels: int = 3
    patch: int = 8
    embed_dim: int = 48
    heads: int = 4
    depth: tuple[int, int, int] = (2, 2, 2)
    cnn_channels: tuple[int, int, int] = (16, 32, 64)
    bottlenecks: int = 1
    t2_channels: tuple[int, int, int] = (32, 16, 16)
    refine_channels: int = 16
    num_classes: int = 4
    dropout: float = 0.1
    ablation: str = "full"
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depth", tuple(self.depth))
        object.__setattr__(self, "cnn_channels", tuple(self.cnn_channels))
        object.__setattr__(self, "t2_channels", tuple(self.t2_channels))
        if self.side % self.patch or self.side % 8:
            raise ValueError(f"side {self.side} must be divisible by the patch size and by 8")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if len(self.depth) != 3 or len(self.cnn_channels) != 3 or len(self.t2_channels) != 3:
            raise ValueError("depth, cnn_channels and t2_channels need one entry per stage")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_classes != 4:
            raise ValueError("the label set has exactly four classes")

    @property
    def grid(self) -> int:
        return self.side // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def use_seg(self) -> bool:
        return self.ablation != "quant_only"

    @property
    def use_quant(self) -> bool:
        return self.ablation != "seg_only"

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DualOutput(NamedTuple):
    seg_logits: list[Tensor] | None  # coarse to fine, native resolution
    t2_pred: Tensor | None  # [N, 1, H, W], normalized T2 in (0, 1)
    attention: list[np.ndarray] = []


@dataclass
class _Ctx:
    training: bool
    seed: int
    counter: int = 0
    attention: list = field(default_factory=list)

    def next_seed(self) -> int:
        self.counter += 1
        return self.seed * 1000003 + self.counter


class SQNet:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(seed=seed)
        self._build()

    # ------------------------------------------------------------------ params
    def _conv(self, name, cin, cout, k, bias=False):
        self.store.add(f"{name}.w", (cout, cin, k, k), fan_in=cin * k * k)
        if bias:
            self.store.add(f"{name}.b", (cout,), init="zeros")

    def _norm(self, name, c):
        self.store.add(f"{name}.g", (c,), init="ones")
        self.store.add(f"{name}.b", (c,), init="zeros")

    def _linear(self, name, din, dout, bias=True):
        self.store.add(f"{name}.w", (din, dout), fan_in=din)
        if bias:
            self.store.add(f"{name}.b", (dout,), init="zeros")

    def _build(self):
        cfg = self.cfg
        c0 = cfg.cnn_channels[0]
        d = cfg.embed_dim
        # CNN branch
        self._conv("stem.conv", cfg.in_channels, c0, 3)
        self._norm("stem.bn", c0)
        cin = c0
        for i, cout in enumerate(cfg.cnn_channels):
            for j in range(cfg.bottlenecks):
                pre = f"cnn.{i}.b{j}"
                src = cin if j == 0 else cout
                mid = max(cout // 2, 4)
                self._conv(f"{pre}.down", src, mid, 1)
                self._norm(f"{pre}.bn1", mid)
                self._conv(f"{pre}.spatial", mid, mid, 3)
                self._norm(f"{pre}.bn2", mid)
                self._conv(f"{pre}.up", mid, cout, 1)
                self._norm(f"{pre}.bn3", cout)
                if src != cout:
                    self._conv(f"{pre}.proj", src, cout, 1)
            cin = cout
        # Transformer branch
        self.store.add("embed.w", (cfg.in_channels * cfg.patch * cfg.patch, d),
                       fan_in=cfg.in_channels * cfg.patch * cfg.patch)
        self.store.add("embed.pos", (cfg.tokens, d), init="zeros")
        for i, depth in enumerate(cfg.depth):
            for j in range(depth):
                pre = f"vit.{i}.{j}"
                self._norm(f"{pre}.ln1", d)
                for nm in ("wq", "wk", "wv", "wo"):
                    self.store.add(f"{pre}.attn.{nm}", (d, d), fan_in=d)
                self.store.add(f"{pre}.attn.bo", (d,), init="zeros")
                self._norm(f"{pre}.ln2", d)
                self._linear(f"{pre}.mlp1", d, 4 * d)
                self._linear(f"{pre}.mlp2", 4 * d, d)
        # coupling
        for i, cc in enumerate(cfg.cnn_channels):
            self._conv(f"fcm.{i}.tok2cnn", d, cc, 1)
            self._conv(f"fcm.{i}.cnn2tok", cc, d, 1)
        # region-supervision decoder
        c1, c2, c3 = cfg.cnn_channels
        k = cfg.num_classes
        self._conv("seg.head0", c3, k, 3, bias=True)
        for lvl, (cin_, cskip) in enumerate(((c3, c2), (c2, c1), (c1, c0)), start=1):
            self._conv(f"seg.up{lvl}.conv", cin_ + cskip, cskip, 3)
            self._norm(f"seg.up{lvl}.bn", cskip)
            self._conv(f"seg.up{lvl}.res.conv1", cskip, cskip, 3)
            self._norm(f"seg.up{lvl}.res.bn1", cskip)
            self._conv(f"seg.up{lvl}.res.conv2", cskip, cskip, 3)
            self._norm(f"seg.up{lvl}.res.bn2", cskip)
            self._conv(f"seg.head{lvl}", cskip, k, 3, bias=True)
        # T2-refine fusion decoder
        q1, q2, q3 = cfg.t2_channels
        r = cfg.refine_channels
        self._conv("t2.fuse", 3 * d, d, 1)
        for i, (a, b) in enumerate(((d, q1), (q1, q2), (q2, q3))):
            self._conv(f"t2.block{i}.conv", a, b, 3)
            self._norm(f"t2.block{i}.bn", b)
        self._conv("t2.refine0", q3 + cfg.in_channels, r, 3, bias=True)
        self._conv("t2.refine1", r, r, 1, bias=True)
        self._conv("t2.out", r, 1, 1, bias=True)

    def param_count(self) -> int:
        return self.store.count()

    # ----------------------------------------------------------------- helpers
    def _p(self, name) -> Tensor:
        return self.store[name]

    def _bn(self, x, name):
        return ops.batch_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"), self.cfg.norm_eps)

    def _conv_apply(self, x, name, pad=None):
        w = self._p(f"{name}.w")
        k = w.shape[-1]
        b = self.store.params.get(f"{name}.b")
        return ops.conv2d(x, w, 1, k // 2 if pad is None else pad, b)

    # ------------------------------------------------------------------ blocks
    def stem(self, x):
        return ops.relu(self._bn(self._conv_apply(x, "stem.conv"), "stem.bn"))

    def cnn_stage(self, x: Tensor, i: int) -> Tensor:
        """Bottlenecks; the first halves the resolution with 2x2 average pooling."""
        for j in range(self.cfg.bottlenecks):
            pre = f"cnn.{i}.b{j}"
            if j == 0:
                x = ops.avg_pool2d(x, 2)
            h = ops.relu(self._bn(self._conv_apply(x, f"{pre}.down"), f"{pre}.bn1"))
            h = ops.relu(self._bn(self._conv_apply(h, f"{pre}.spatial"), f"{pre}.bn2"))
            h = self._bn(self._conv_apply(h, f"{pre}.up"), f"{pre}.bn3")
            short = self._conv_apply(x, f"{pre}.proj") if f"{pre}.proj.w" in self.store else x
            x = ops.relu(ops.add(h, short))
        return x

    def patch_embed(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        z = ops.reshape(x, (n, c, gh, p, gw, p))
        z = ops.transpose(z, (0, 2, 4, 1, 3, 5))
        z = ops.reshape(z, (n, gh * gw, c * p * p))
        z = ops.linear(z, self._p("embed.w"))
        return ops.add(z, self._p("embed.pos"))

    def transformer_block(self, x: Tensor, pre: str, ctx: _Ctx | None = None) -> Tensor:
        d = self.cfg.embed_dim
        h = ops.layer_norm(x, self._p(f"{pre}.ln1.g"), self._p(f"{pre}.ln1.b"), self.cfg.norm_eps)
        params = {nm: self._p(f"{pre}.attn.{nm}") for nm in ("wq", "wk", "wv", "wo", "bo")}
        h, weights = ops.multi_head_attention(h, self.cfg.heads, params, return_weights=True)
        if ctx is not None:
            ctx.attention.append(weights)
        x = ops.add(x, h)
        h = ops.layer_norm(x, self._p(f"{pre}.ln2.g"), self._p(f"{pre}.ln2.b"), self.cfg.norm_eps)
        h = ops.relu(ops.linear(h, self._p(f"{pre}.mlp1.w"), self._p(f"{pre}.mlp1.b")))
        h = ops.linear(h, self._p(f"{pre}.mlp2.w"), self._p(f"{pre}.mlp2.b"))
        assert h.shape[-1] == d
        return ops.add(x, h)

    def transformer_stage(self, tokens: Tensor, i: int, ctx: _Ctx | None = None) -> Tensor:
        for j in range(self.cfg.depth[i]):
            tokens = self.transformer_block(tokens, f"vit.{i}.{j}", ctx)
        return tokens

    def tokens_to_grid(self, tokens: Tensor) -> Tensor:
        n, t, d = tokens.shape
        g = int(round(np.sqrt(t)))
        if g * g != t:
            raise ValueError(f"{t} tokens do not form a square grid")
        return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (n, d, g, g))

    def fcm_fuse(self, cnn_feat: Tensor, tokens: Tensor, i: int) -> tuple[Tensor, Tensor]:
        """Channel-aligned additive coupling in both directions."""
        n, cc, hc, wc = cnn_feat.shape
        grid = self.tokens_to_grid(tokens)
        g = grid.shape[-1]
        t2c = ops.conv2d(grid, self._p(f"fcm.{i}.tok2cnn.w"))
        t2c = ops.bilinear_resize(t2c, hc, wc)
        if hc > g and hc % g == 0 and wc == hc:
            pooled = ops.avg_pool2d(cnn_feat, hc // g)
        else:
            pooled = ops.bilinear_resize(cnn_feat, g, g)
        c2t = ops.conv2d(pooled, self._p(f"fcm.{i}.cnn2tok.w"))
        c2t = ops.transpose(ops.reshape(c2t, (n, tokens.shape[2], g * g)), (0, 2, 1))
        return ops.add(cnn_feat, t2c), ops.add(tokens, c2t)

    def _res_block(self, x, pre):
        h = ops.relu(self._bn(self._conv_apply(x, f"{pre}.conv1"), f"{pre}.bn1"))
        h = self._bn(self._conv_apply(h, f"{pre}.conv2"), f"{pre}.bn2")
        return ops.relu(ops.add(x, h))

    def region_supervision_decode(self, stem_feat, feats) -> list[Tensor]:
        f1, f2, f3 = feats
        d = f3
        logits = [self._conv_apply(d, "seg.head0")]
        for lvl, skip in enumerate((f2, f1, stem_feat), start=1):
            d = ops.bilinear_resize(d, skip.shape[2], skip.shape[3])
            d = ops.concat([d, skip], axis=1)
            d = ops.relu(self._bn(self._conv_apply(d, f"seg.up{lvl}.conv"), f"seg.up{lvl}.bn"))
            d = self._res_block(d, f"seg.up{lvl}.res")
            logits.append(self._conv_apply(d, f"seg.head{lvl}"))
        return logits

    def t2_refine_decode(self, stage_tokens: list[Tensor], x: Tensor, ctx: _Ctx) -> Tensor:
        grids = [self.tokens_to_grid(t) for t in stage_tokens]
        h = ops.conv2d(ops.concat(grids, axis=1), self._p("t2.fuse.w"))
        h = ops.dropout(h, self.cfg.dropout, ctx.next_seed(), ctx.training)
        side = self.cfg.side
        for i in range(3):
            if i > 0:
                h = ops.bilinear_resize(h, 2 * h.shape[2], 2 * h.shape[3])
            h = ops.relu(self._bn(self._conv_apply(h, f"t2.block{i}.conv"), f"t2.block{i}.bn"))
        h = ops.bilinear_resize(h, x.shape[2], x.shape[3])
        assert x.shape[2] == side
        h = ops.concat([h, x], axis=1)
        h = ops.relu(self._conv_apply(h, "t2.refine0"))
        h = ops.relu(self._conv_apply(h, "t2.refine1"))
        return ops.sigmoid(self._conv_apply(h, "t2.out"))

    # ----------------------------------------------------------------- forward
    def forward(self, x, training: bool = True, seed: int = 0) -> DualOutput:
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.side, cfg.side):
            raise ValueError(f"expected input [N,{cfg.in_channels},{cfg.side},{cfg.side}], "
                             f"got {x.shape}")
        ctx = _Ctx(training, seed)
        feats, stage_tokens = [], []
        feat = self.stem(x) if cfg.use_seg else None
        stem_feat = feat
        tokens = self.patch_embed(x) if cfg.use_quant else None
        for i in range(3):
            if cfg.use_seg:
                feat = self.cnn_stage(feat, i)
            if cfg.use_quant:
                tokens = self.transformer_stage(tokens, i, ctx)
            if cfg.use_seg and cfg.use_quant:
                feat, tokens = self.fcm_fuse(feat, tokens, i)
            feats.append(feat)
            stage_tokens.append(tokens)
        seg = self.region_supervision_decode(stem_feat, feats) if cfg.use_seg else None
        t2 = self.t2_refine_decode(stage_tokens, x, ctx) if cfg.use_quant else None
        return DualOutput(seg, t2, ctx.attention)

    __call__ = forward

    # ---------------------------------------------------------------- inference
    def predict(self, x: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Labels from the finest head and T2 in ms; nothing is recorded."""
        out = self.forward(Tensor(x), training=False)
        labels = None
        if out.seg_logits is not None:
            labels = out.seg_logits[-1].data.argmax(axis=1).astype(np.uint8)
        t2 = None if out.t2_pred is None else out.t2_pred.data[:, 0] * 200.0
        return labels, t2
