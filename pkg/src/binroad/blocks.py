"""Architectural building blocks of the dual-stream segmentation network.

Everything is built from the binary convolution unit (BCU): learnable
pre-sign shift, sign with straight-through gradient, the scaled binary
convolution, batch norm, a shifted activation, and an identity shortcut
whenever shapes agree. With `binarize=False` every unit degrades to a
conventional full-precision convolution of identical topology, which is the
ablation twin. In eval mode the binary convolutions can route through the
packed XNOR/PopCount kernels; the result is bit-identical to the float
emulation because both accumulate exact small integers.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import bitcore
from .metrics import LayerRow


def _conv_out(hw, k, stride, padding, dilation):
    h, w = hw
    return (
        bitcore.conv_out_size(h, k, stride, padding, dilation),
        bitcore.conv_out_size(w, k, stride, padding, dilation),
    )


def _kaiming_uniform(rng, shape, latent):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    if latent:
        bound = min(bound, 0.9)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class BCU(ag.Module):
    """Binary Convolution Unit: shift, sign, binary conv, BN, shifted activation.

    The weight scale alpha is the per-output-channel mean absolute latent
    weight, recomputed every forward (gradients flow through it); the
    activation scale beta is fixed to 1.
    """

    def __init__(self, cin, cout, k=3, stride=1, padding=None, dilation=1,
                 binarize=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        self.binarize = binarize
        self.use_packed = False
        self.weight = ag.Parameter(_kaiming_uniform(rng, (cout, cin, k, k), binarize))
        self.weight.latent = binarize
        self.shift = ag.ChannelShift(cin)
        self.bn = ag.BatchNorm(cout)
        self.act = ag.RPReLU(cout)
        self.has_shortcut = cin == cout and stride == 1

    def _alpha(self):
        flat = ag.reshape(ag.absolute(self.weight), (self.cout, -1))
        return ag.tmean(flat, axis=1)

    def _packed_forward(self, shifted: np.ndarray) -> np.ndarray:
        scales = bitcore.ScaleFactors(bitcore.weight_scale(self.weight.values), 1.0)
        wb = bitcore.sign_pack(self.weight.values)
        outs = [
            bitcore.binary_conv2d(wb, bitcore.sign_pack(sample), scales,
                                  self.stride, self.padding, self.dilation)
            for sample in shifted
        ]
        return np.stack(outs)

    def conv_stage(self, x: ag.Tensor) -> ag.Tensor:
        """Shift, sign, and the scaled binary convolution (before BN/activation)."""
        s = self.shift(x)
        if self.binarize:
            if self.use_packed and not self.training:
                return ag.Tensor(self._packed_forward(s.values))
            xb = ag.sign_ste(s)
            wb = ag.sign_ste(self.weight)
            y = ag.conv2d(xb, wb, self.stride, self.padding, self.dilation)
            return ag.mul(y, ag.reshape(self._alpha(), (1, self.cout, 1, 1)))
        return ag.conv2d(s, self.weight, self.stride, self.padding, self.dilation)

    def forward(self, x: ag.Tensor) -> ag.Tensor:
        y = self.act(self.bn(self.conv_stage(x)))
        if self.has_shortcut:
            y = ag.add(y, x)
        return y

    __call__ = forward

    def out_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo = _conv_out((h, w), self.k, self.stride, self.padding, self.dilation)
        return (self.cout, ho, wo)

    def complexity_rows(self, in_shape, prefix=""):
        c, h, w = in_shape
        co, ho, wo = self.out_shape(in_shape)
        macs = self.cout * self.cin * self.k * self.k * ho * wo
        wsize = self.weight.values.size
        elementwise = 2 * co * ho * wo + 3 * co * ho * wo + c * h * w  # BN + act + shift
        if self.binarize:
            bops, flops = 2 * macs, co * ho * wo + elementwise  # alpha scaling is float
            pbits = wsize + 32 * self.cout  # packed weights + alpha
        else:
            bops, flops = 0, 2 * macs + elementwise
            pbits = 32 * wsize
        if self.has_shortcut:
            flops += co * ho * wo
        pbits += 32 * (self.cin + 4 * co + 3 * co)  # shift + BN + activation params
        kind = "bcu" if self.binarize else "conv-unit"
        return [LayerRow(f"{prefix}", kind, bops, flops, pbits)], (co, ho, wo)


class AGBlock(ag.Module):
    """Attention-guided gating that fuses camera features into the LiDAR stream.

    F_fu  = BCU(concat(P, Q) + stack(P+Q, P+Q))
    out   = P + sigmoid(F_fu + BN(BCU(F_fu))) * F_fu
    """

    def __init__(self, channels, binarize=True, rng=None):
        super().__init__()
        self.channels = channels
        self.fuse = BCU(2 * channels, channels, binarize=binarize, rng=rng)
        self.gate = BCU(channels, channels, binarize=binarize, rng=rng)
        self.bn = ag.BatchNorm(channels)

    def fusion(self, p: ag.Tensor, q: ag.Tensor) -> ag.Tensor:
        if p.shape != q.shape:
            raise ValueError(f"stream shape mismatch: {p.shape} vs {q.shape}")
        v = ag.add(p, q)
        fin = ag.add(ag.concat([p, q], axis=1), ag.concat([v, v], axis=1))
        return self.fuse(fin)

    def forward(self, p: ag.Tensor, q: ag.Tensor, gate_logit=None) -> ag.Tensor:
        f = self.fusion(p, q)
        if gate_logit is None:
            gate_logit = ag.add(f, self.bn(self.gate(f)))
        elif not isinstance(gate_logit, ag.Tensor):
            gate_logit = ag.Tensor(np.full(f.shape, gate_logit, dtype=f.values.dtype))
        return ag.add(p, ag.mul(ag.sigmoid(gate_logit), f))

    __call__ = forward

    def out_shape(self, in_shape):
        return in_shape

    def complexity_rows(self, in_shape, prefix=""):
        c, h, w = in_shape
        rows, _ = self.fuse.complexity_rows((2 * c, h, w), f"{prefix}.fuse")
        grows, _ = self.gate.complexity_rows(in_shape, f"{prefix}.gate")
        rows += grows
        n = c * h * w
        # concat adds, BN eta, sigmoid, gating product, residual
        rows.append(LayerRow(f"{prefix}.gating", "gate", 0, 2 * 2 * n + 2 * n + 4 * n + 2 * n, 32 * 4 * c))
        return rows, in_shape


class BinaryResBlock(ag.Module):
    """Three chained BCUs whose outputs are averaged; out2 halves resolution."""

    unit_cls_binarize = True

    def __init__(self, cin, cout, binarize=True, rng=None, k_first=3):
        super().__init__()
        self.u1 = BCU(cin, cout, k=k_first, binarize=binarize, rng=rng)
        self.u2 = BCU(cout, cout, binarize=binarize, rng=rng)
        self.u3 = BCU(cout, cout, binarize=binarize, rng=rng)

    def forward(self, x: ag.Tensor):
        y1 = self.u1(x)
        y2 = self.u2(y1)
        y3 = self.u3(y2)
        third = ag.Tensor(np.asarray(1.0 / 3.0, dtype=x.values.dtype))
        out1 = ag.mul(ag.add(ag.add(y1, y2), y3), third)
        return out1, ag.avg_pool2(out1)

    __call__ = forward

    def out_shape(self, in_shape):
        s1 = self.u1.out_shape(in_shape)
        c, h, w = s1
        return s1, (c, h // 2, w // 2)

    def complexity_rows(self, in_shape, prefix=""):
        rows, shape = self.u1.complexity_rows(in_shape, f"{prefix}.u1")
        r2, shape = self.u2.complexity_rows(shape, f"{prefix}.u2")
        r3, shape = self.u3.complexity_rows(shape, f"{prefix}.u3")
        rows += r2 + r3
        c, h, w = shape
        rows.append(LayerRow(f"{prefix}.aggregate", "mean-pool", 0, 3 * c * h * w + 5 * c * (h // 2) * (w // 2), 0))
        return rows, shape


class ShallowResBlock(BinaryResBlock):
    """Full-precision first stage: one 1x1 convolution and two conv units."""

    def __init__(self, cin, cout, rng=None):
        super().__init__(cin, cout, binarize=False, rng=rng, k_first=1)


class _DilatedMeanBlock(ag.Module):
    """Parallel dilated BCUs aggregated by add-and-average (no 1x1 projection)."""

    min_spatial = 2

    def __init__(self, channels, rates, binarize=True, rng=None):
        super().__init__()
        self.rates = tuple(rates)
        for i, d in enumerate(self.rates):
            self.add_module(f"branch{i}", BCU(channels, channels, dilation=d, binarize=binarize, rng=rng))

    def _branches(self):
        return [self._modules[f"branch{i}"] for i in range(len(self.rates))]

    def forward(self, x: ag.Tensor) -> ag.Tensor:
        h, w = x.shape[2], x.shape[3]
        if min(h, w) < self.min_spatial:
            raise ValueError(
                f"input {h}x{w} below the minimum {self.min_spatial}x{self.min_spatial} "
                f"for dilated rates {self.rates}"
            )
        outs = [b(x) for b in self._branches()]
        acc = outs[0]
        for o in outs[1:]:
            acc = ag.add(acc, o)
        return ag.mul(acc, ag.Tensor(np.asarray(1.0 / len(outs), dtype=x.values.dtype)))

    __call__ = forward

    def out_shape(self, in_shape):
        return in_shape

    def complexity_rows(self, in_shape, prefix=""):
        rows = []
        for i, b in enumerate(self._branches()):
            r, _ = b.complexity_rows(in_shape, f"{prefix}.d{self.rates[i]}")
            rows += r
        c, h, w = in_shape
        rows.append(LayerRow(f"{prefix}.aggregate", "mean", 0, len(self.rates) * c * h * w, 0))
        return rows, in_shape


class BinaryASPP(_DilatedMeanBlock):
    """Bottleneck pyramid of four dilated BCUs, rates {1, 6, 12, 18}."""

    def __init__(self, channels, rates=(1, 6, 12, 18), binarize=True, rng=None):
        super().__init__(channels, rates, binarize=binarize, rng=rng)


class MBB(_DilatedMeanBlock):
    """Multi-scale binary dilated block for early camera stages, rates {1, 2, 3}."""

    def __init__(self, channels, rates=(1, 2, 3), binarize=True, rng=None):
        super().__init__(channels, rates, binarize=binarize, rng=rng)


class BinaryLinear(ag.Module):
    """Token-wise binary projection: shift, sign, scaled binary matmul, BN."""

    def __init__(self, din, dout, binarize=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.din, self.dout, self.binarize = din, dout, binarize
        self.use_packed = False
        self.weight = ag.Parameter(_kaiming_uniform(rng, (dout, din), binarize))
        self.weight.latent = binarize
        self.shift = ag.ChannelShift(din, axis=2)
        self.bn = ag.BatchNorm(dout, axis=2)

    def _packed_forward(self, shifted: np.ndarray) -> np.ndarray:
        b, n, _ = shifted.shape
        scales = bitcore.ScaleFactors(bitcore.weight_scale(self.weight.values), 1.0)
        wb = bitcore.sign_pack(self.weight.values)
        ab = bitcore.sign_pack(shifted.reshape(b * n, self.din).T)
        out = bitcore.binary_gemm(wb, ab, scales)  # (dout, b*n)
        return out.T.reshape(b, n, self.dout)

    def forward(self, x: ag.Tensor) -> ag.Tensor:
        s = self.shift(x)
        if self.binarize:
            if self.use_packed and not self.training:
                y = ag.Tensor(self._packed_forward(s.values))
            else:
                xb = ag.sign_ste(s)
                wb = ag.sign_ste(self.weight)
                y = ag.matmul(xb, ag.transpose(wb, (1, 0)))
                alpha = ag.reshape(ag.tmean(ag.absolute(self.weight), axis=1), (1, 1, self.dout))
                y = ag.mul(y, alpha)
        else:
            y = ag.matmul(s, ag.transpose(self.weight, (1, 0)))
        return self.bn(y)

    __call__ = forward

    def complexity_rows(self, n_tokens, prefix=""):
        macs = n_tokens * self.din * self.dout
        flops = n_tokens * self.din + 2 * n_tokens * self.dout  # shift + BN
        if self.binarize:
            bops = 2 * macs
            flops += n_tokens * self.dout  # alpha scaling
            pbits = self.weight.values.size + 32 * self.dout
        else:
            bops, flops = 0, flops + 2 * macs
            pbits = 32 * self.weight.values.size
        pbits += 32 * (self.din + 4 * self.dout)
        return [LayerRow(prefix, "bin-linear" if self.binarize else "linear", bops, flops, pbits)]


class BinaryViTBlock(ag.Module):
    """Transformer block with binarized projections and binarized attention
    scores; softmax and the probability-weighted value mix stay full precision.
    """

    def __init__(self, dim, heads, binarize=True, mlp_ratio=2, rng=None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.binarize = dim, heads, binarize
        self.head_dim = dim // heads
        hidden = int(dim * mlp_ratio)
        self.hidden = hidden
        self.wq = BinaryLinear(dim, dim, binarize=binarize, rng=rng)
        self.wk = BinaryLinear(dim, dim, binarize=binarize, rng=rng)
        self.wv = BinaryLinear(dim, dim, binarize=binarize, rng=rng)
        self.shift_q = ag.ChannelShift(dim, axis=2)
        self.shift_k = ag.ChannelShift(dim, axis=2)
        self.proj = BinaryLinear(dim, dim, binarize=binarize, rng=rng)
        self.attn_act = ag.RPReLU(dim, axis=2)
        self.mlp1 = BinaryLinear(dim, hidden, binarize=binarize, rng=rng)
        self.mlp_act = ag.RPReLU(hidden, axis=2)
        self.mlp2 = BinaryLinear(hidden, dim, binarize=binarize, rng=rng)

    def project_qkv(self, x: ag.Tensor):
        return self.wq(x), self.wk(x), self.wv(x)

    def _split_heads(self, t: ag.Tensor):
        b, n, _ = t.shape
        return ag.transpose(ag.reshape(t, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attend(self, q: ag.Tensor, k: ag.Tensor, v: ag.Tensor) -> ag.Tensor:
        b, n, _ = q.shape
        if self.binarize:
            qs = ag.sign_ste(self.shift_q(q))
            ks = ag.sign_ste(self.shift_k(k))
        else:
            qs, ks = self.shift_q(q), self.shift_k(k)
        qh, kh, vh = self._split_heads(qs), self._split_heads(ks), self._split_heads(v)
        scale = ag.Tensor(np.asarray(1.0 / np.sqrt(self.head_dim), dtype=q.values.dtype))
        scores = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))), scale)
        probs = ag.softmax(scores, axis=-1)
        mixed = ag.matmul(probs, vh)
        return ag.reshape(ag.transpose(mixed, (0, 2, 1, 3)), (b, n, self.dim))

    def forward(self, x: ag.Tensor) -> ag.Tensor:
        q, k, v = self.project_qkv(x)
        attn = self.proj(self.attend(q, k, v))
        x = ag.add(x, self.attn_act(attn))
        m = self.mlp2(self.mlp_act(self.mlp1(x)))
        return ag.add(x, m)

    __call__ = forward

    def complexity_rows(self, n_tokens, prefix=""):
        rows = []
        for name, lin, nt in [
            ("wq", self.wq, n_tokens),
            ("wk", self.wk, n_tokens),
            ("wv", self.wv, n_tokens),
            ("proj", self.proj, n_tokens),
            ("mlp1", self.mlp1, n_tokens),
            ("mlp2", self.mlp2, n_tokens),
        ]:
            rows += lin.complexity_rows(nt, f"{prefix}.{name}")
        score_macs = n_tokens * n_tokens * self.dim
        attn_flops = 5 * self.heads * n_tokens * n_tokens + n_tokens * n_tokens  # softmax + scaling
        mix_flops = 2 * score_macs  # probability-weighted value mix stays float
        if self.binarize:
            rows.append(
                LayerRow(f"{prefix}.attention", "bin-attn", 2 * score_macs,
                         attn_flops + mix_flops + 2 * n_tokens * self.dim, 32 * 2 * self.dim)
            )
        else:
            rows.append(
                LayerRow(f"{prefix}.attention", "attn", 0,
                         2 * score_macs + attn_flops + mix_flops + 2 * n_tokens * self.dim, 32 * 2 * self.dim)
            )
        # residuals + shifted activations
        rows.append(
            LayerRow(f"{prefix}.residuals", "add-act", 0,
                     2 * n_tokens * self.dim + 3 * n_tokens * (self.dim + self.hidden),
                     32 * 3 * (self.dim + self.hidden))
        )
        return rows
