"""The assembled dual-stream road segmentation network.

Both streams are four-stage UNets at 1/2, 1/4, 1/8 and 1/16 of the input
resolution. The camera encoder is a CNN-ViT hybrid (multi-scale dilated
blocks early, transformer blocks at the deepest stage); the LiDAR encoder is
a stack of Binary-ResBlocks with a Binary-ASPP bottleneck. At every encoder
stage an attention-guided gate fuses camera features into the LiDAR stream
(one way; the gated output carries the LiDAR residual). Decoders upsample
with channel-adjust units plus pixel shuffle and add the encoder skips.
Heads are full-precision 1x1 convolutions, as are the input stems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import losses as lo
from .blocks import AGBlock, BCU, BinaryASPP, BinaryResBlock, BinaryViTBlock, MBB, ShallowResBlock
from .metrics import ConfusionMatrix, LayerRow, segmentation_scores


@dataclass
class PathfinderConfig:
    resolution: int = 512
    classes: int = 2
    widths: tuple = (32, 64, 128, 256)
    pcd_channels: int = 4
    vit_depth: int = 2
    vit_heads: int = 4
    vit_mlp_ratio: float = 2.0
    binarize: bool = True
    use_agb: bool = True
    aspp_rates: tuple = (1, 6, 12, 18)
    mbb_rates: tuple = (1, 2, 3)
    max_range: float = 120.0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.mbb_rates = tuple(int(r) for r in self.mbb_rates)
        if self.resolution % 16 != 0:
            raise ValueError(f"resolution {self.resolution} not divisible by 16")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.widths) != 4:
            raise ValueError("four stage widths required")

    def to_text(self) -> str:
        lines = []
        for key in ("resolution", "classes", "widths", "pcd_channels", "vit_depth",
                    "vit_heads", "vit_mlp_ratio", "binarize", "use_agb", "aspp_rates",
                    "mbb_rates", "max_range", "seed"):
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PathfinderConfig":
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in ("widths", "aspp_rates", "mbb_rates"):
                kwargs[key] = tuple(int(v) for v in val.split(","))
            elif key in ("resolution", "classes", "pcd_channels", "vit_depth", "vit_heads", "seed"):
                kwargs[key] = int(val)
            elif key in ("vit_mlp_ratio", "max_range"):
                kwargs[key] = float(val)
            elif key in ("binarize", "use_agb"):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            else:
                raise ValueError(f"unknown config key: {key}")
        return cls(**kwargs)

    def digest(self) -> str:
        return ag.config_digest(self.to_text())


@dataclass
class Sample:
    """One training item: image, projected point-cloud raster, void mask, labels."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    raster: np.ndarray  # (pcd_channels, H, W) float32
    void_mask: np.ndarray  # (H, W) binary
    labels: np.ndarray  # (H, W) int
    meta: dict = field(default_factory=dict)


class ConvHead(ag.Module):
    """Full-precision 1x1 projection to classes*r^2 channels plus pixel shuffle."""

    def __init__(self, cin, classes, r=2, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.classes, self.r = cin, classes, r
        cout = classes * r * r
        bound = np.sqrt(6.0 / cin)
        self.weight = ag.Parameter(rng.uniform(-bound, bound, size=(cout, cin, 1, 1)).astype(np.float32))
        self.bias = ag.Parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x):
        y = ag.conv2d(x, self.weight)
        y = ag.add(y, ag.reshape(self.bias, (1, self.classes * self.r * self.r, 1, 1)))
        return ag.pixel_shuffle(y, self.r)

    __call__ = forward

    def complexity_rows(self, in_shape, prefix=""):
        c, h, w = in_shape
        cout = self.classes * self.r * self.r
        macs = cout * c * h * w
        return (
            [LayerRow(prefix, "head", 0, 2 * macs + cout * h * w, 32 * (self.weight.values.size + cout))],
            (self.classes, h * self.r, w * self.r),
        )


class UpsampleUnit(ag.Module):
    """Channel-adjust BCU followed by 2x pixel shuffle (arithmetic-free upsampling)."""

    def __init__(self, cin, cout, binarize=True, rng=None):
        super().__init__()
        self.unit = BCU(cin, 4 * cout, binarize=binarize, rng=rng)
        self.cout = cout

    def forward(self, x):
        return ag.pixel_shuffle(self.unit(x), 2)

    __call__ = forward

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (self.cout, h * 2, w * 2)

    def complexity_rows(self, in_shape, prefix=""):
        rows, mid = self.unit.complexity_rows(in_shape, f"{prefix}.adjust")
        return rows, self.out_shape(in_shape)


class PathfinderModel(ag.Module):
    """Dual-stream binarized segmentation model (camera + LiDAR UNets)."""

    def __init__(self, config: PathfinderConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        w1, w2, w3, w4 = config.widths
        binz = config.binarize

        # camera encoder: FP stem, dilated multi-scale stages, ViT at 1/16
        self.cam_stem = BCU(3, w1, stride=2, binarize=False, rng=rng)
        self.cam_stage1 = MBB(w1, config.mbb_rates, binarize=binz, rng=rng)
        self.cam_down1 = BCU(w1, w2, stride=2, binarize=binz, rng=rng)
        self.cam_stage2 = MBB(w2, config.mbb_rates, binarize=binz, rng=rng)
        self.cam_down2 = BCU(w2, w3, stride=2, binarize=binz, rng=rng)
        self.cam_stage3 = MBB(w3, config.mbb_rates, binarize=binz, rng=rng)
        self.cam_down3 = BCU(w3, w4, stride=2, binarize=binz, rng=rng)
        for i in range(config.vit_depth):
            self.add_module(
                f"cam_vit{i}",
                BinaryViTBlock(w4, config.vit_heads, binarize=binz,
                               mlp_ratio=config.vit_mlp_ratio, rng=rng),
            )

        # LiDAR encoder: FP shallow stem at 1/2, Binary-ResBlocks, ASPP bottleneck
        self.lid_stem = ShallowResBlock(config.pcd_channels, w1, rng=rng)
        self.lid_rb1 = BinaryResBlock(w1, w1, binarize=binz, rng=rng)
        self.lid_rb2 = BinaryResBlock(w1, w2, binarize=binz, rng=rng)
        self.lid_rb3 = BinaryResBlock(w2, w3, binarize=binz, rng=rng)
        self.lid_rb4 = BinaryResBlock(w3, w4, binarize=binz, rng=rng)
        if config.use_agb:
            for i, c in enumerate((w1, w2, w3, w4), start=1):
                self.add_module(f"agb{i}", AGBlock(c, binarize=binz, rng=rng))
        self.aspp = BinaryASPP(w4, config.aspp_rates, binarize=binz, rng=rng)

        # decoders: ResBlock pyramids, pixel-shuffle upsampling, FP heads
        for stream in ("cam", "lid"):
            self.add_module(f"{stream}_dec4", BinaryResBlock(w4, w4, binarize=binz, rng=rng))
            self.add_module(f"{stream}_up3", UpsampleUnit(w4, w3, binarize=binz, rng=rng))
            self.add_module(f"{stream}_dec3", BinaryResBlock(w3, w3, binarize=binz, rng=rng))
            self.add_module(f"{stream}_up2", UpsampleUnit(w3, w2, binarize=binz, rng=rng))
            self.add_module(f"{stream}_dec2", BinaryResBlock(w2, w2, binarize=binz, rng=rng))
            self.add_module(f"{stream}_up1", UpsampleUnit(w2, w1, binarize=binz, rng=rng))
            self.add_module(f"{stream}_dec1", BinaryResBlock(w1, w1, binarize=binz, rng=rng))
        self.head_img = ConvHead(w1, config.classes, rng=rng)
        self.head_pcd = ConvHead(w1, config.classes, rng=rng)
        self.finalize_names()

    # ------------------------------------------------------------------
    def set_packed(self, flag: bool):
        """Route eval-mode binary convolutions through the packed kernels."""
        for m in self.modules():
            if hasattr(m, "use_packed"):
                m.use_packed = flag
        return self

    def _check_input(self, image, raster):
        h, w = image.shape[-2], image.shape[-1]
        if h % 16 or w % 16:
            raise ValueError(f"resolution {h}x{w} not divisible by 16")
        if raster.shape[-2:] != (h, w):
            raise ValueError("image and raster resolutions differ")

    def _vit_stage(self, x):
        b, c, h, w = x.shape
        tokens = ag.transpose(ag.reshape(x, (b, c, h * w)), (0, 2, 1))
        for i in range(self.config.vit_depth):
            tokens = self._modules[f"cam_vit{i}"](tokens)
        return ag.reshape(ag.transpose(tokens, (0, 2, 1)), (b, c, h, w))

    def _encode_camera(self, image):
        c1 = self.cam_stage1(self.cam_stem(image))
        c2 = self.cam_stage2(self.cam_down1(c1))
        c3 = self.cam_stage3(self.cam_down2(c2))
        c4 = self._vit_stage(self.cam_down3(c3))
        return c1, c2, c3, c4

    def _encode_lidar(self, raster, cam_feats):
        x, _ = self.lid_stem(ag.avg_pool2(raster))
        fused = []
        for i, rb in enumerate((self.lid_rb1, self.lid_rb2, self.lid_rb3, self.lid_rb4), start=1):
            out1, _ = rb(x)
            f = self._modules[f"agb{i}"](out1, cam_feats[i - 1]) if self.config.use_agb else out1
            fused.append(f)
            if i < 4:
                x = ag.avg_pool2(f)
        return fused, self.aspp(fused[3])

    def _decode(self, stream, start, skips):
        d = self._modules[f"{stream}_dec4"](start)[0]
        for i, skip in ((3, skips[2]), (2, skips[1]), (1, skips[0])):
            d = ag.add(self._modules[f"{stream}_up{i}"](d), skip)
            d = self._modules[f"{stream}_dec{i}"](d)[0]
        return d

    def forward_batch(self, image: ag.Tensor, raster: ag.Tensor):
        self._check_input(image.values, raster.values)
        cam = self._encode_camera(image)
        fused, bott = self._encode_lidar(raster, cam)
        logits_img = self.head_img(self._decode("cam", cam[3], cam[:3]))
        logits_pcd = self.head_pcd(self._decode("lid", ag.add(bott, fused[3]), fused[:3]))
        return logits_img, logits_pcd

    def forward(self, image, pcd_raster, void_mask):
        """Single-sample forward: (3,H,W) + (Cp,H,W) + (H,W) -> two (C,H,W) logit maps."""
        void = np.asarray(void_mask)
        if not np.isin(void, (0, 1)).all():
            raise ValueError("void mask must be binary")
        img = ag.Tensor(np.asarray(image, dtype=np.float32)[None])
        ras = ag.Tensor(np.asarray(pcd_raster, dtype=np.float32)[None])
        li, lp = self.forward_batch(img, ras)
        return ag.reshape(li, li.shape[1:]), ag.reshape(lp, lp.shape[1:])

    __call__ = forward_batch

    # ------------------------------------------------------------------
    def camera_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(("cam_", "head_img"))]

    def lidar_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(("cam_", "head_img"))]

    # ------------------------------------------------------------------
    def complexity_rows(self):
        """Per-layer complexity table mirroring the forward topology."""
        cfg = self.config
        res = cfg.resolution
        w1, w2, w3, w4 = cfg.widths
        rows = []

        def walk(module, shape, name):
            r, out = module.complexity_rows(shape, name)
            rows.extend(r)
            return out

        s = walk(self.cam_stem, (3, res, res), "cam_stem")
        s = walk(self.cam_stage1, s, "cam_stage1")
        c1 = s
        s = walk(self.cam_down1, s, "cam_down1")
        s = walk(self.cam_stage2, s, "cam_stage2")
        c2 = s
        s = walk(self.cam_down2, s, "cam_down2")
        s = walk(self.cam_stage3, s, "cam_stage3")
        c3 = s
        s = walk(self.cam_down3, s, "cam_down3")
        tokens = s[1] * s[2]
        for i in range(cfg.vit_depth):
            rows.extend(self._modules[f"cam_vit{i}"].complexity_rows(tokens, f"cam_vit{i}"))
        c4 = s

        half = res // 2
        rows.append(LayerRow("lid_prepool", "pool", 0, 5 * cfg.pcd_channels * half * half, 0))
        s = walk(self.lid_stem, (cfg.pcd_channels, half, half), "lid_stem")
        lid_shapes = []
        for i, rb in enumerate((self.lid_rb1, self.lid_rb2, self.lid_rb3, self.lid_rb4), start=1):
            s = walk(rb, s, f"lid_rb{i}")
            if cfg.use_agb:
                s = walk(self._modules[f"agb{i}"], s, f"agb{i}")
            lid_shapes.append(s)
            if i < 4:
                c, h, w = s
                rows.append(LayerRow(f"lid_pool{i}", "pool", 0, 5 * c * (h // 2) * (w // 2), 0))
                s = (c, h // 2, w // 2)
        s = walk(self.aspp, lid_shapes[3], "aspp")
        rows.append(LayerRow("lid_skip4", "add", 0, int(np.prod(s)), 0))

        for stream, skips, s4 in (("cam", (c1, c2, c3), c4), ("lid", tuple(lid_shapes[:3]), s)):
            d = walk(self._modules[f"{stream}_dec4"], s4, f"{stream}_dec4")
            for i, skip in ((3, skips[2]), (2, skips[1]), (1, skips[0])):
                d = walk(self._modules[f"{stream}_up{i}"], d, f"{stream}_up{i}")
                rows.append(LayerRow(f"{stream}_skip{i}", "add", 0, int(np.prod(skip)), 0))
                d = walk(self._modules[f"{stream}_dec{i}"], d, f"{stream}_dec{i}")
            head = self.head_img if stream == "cam" else self.head_pcd
            walk(head, d, f"head_{'img' if stream == 'cam' else 'pcd'}")
        return rows


# ---------------------------------------------------------------------------
# training / inference


@dataclass
class TrainSetup:
    schedule: lo.VariantFocalSchedule
    focal_gamma: float = 2.0
    batch_size: int = 2
    seed: int = 0
    lovasz_classes: object = "present"


def build_optimizers(model: PathfinderModel, epoch_total: int, lr_cam: float = 0.001,
                     lr_lidar: float = 0.0005, weight_decay: float = 0.01):
    """Paper recipe: SGD with cosine decay on the camera stream, AdamW on the
    LiDAR stream (which owns the fusion gates)."""
    return {
        "camera": ag.SgdCosine(model.camera_parameters(), lr0=lr_cam, epoch_total=epoch_total),
        "lidar": ag.AdamW(model.lidar_parameters(), lr=lr_lidar, weight_decay=weight_decay),
    }


def _stack_batch(samples):
    img = np.stack([s.image for s in samples]).astype(np.float32)
    ras = np.stack([s.raster for s in samples]).astype(np.float32)
    void = np.stack([s.void_mask for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return img, ras, void, labels


def compute_losses(logits_img, logits_pcd, labels, void, setup: TrainSetup, epoch: int):
    probs_img = ag.softmax(logits_img, axis=1)
    probs_pcd = ag.softmax(logits_pcd, axis=1)
    return {
        "focal": lo.focal_loss(probs_img, labels, gamma=setup.focal_gamma),
        "lovasz_img": lo.lovasz_loss(logits_img, labels, classes=setup.lovasz_classes),
        "vf": lo.variant_focal_loss(probs_pcd, labels, void, setup.schedule, ep=epoch),
        "lovasz_pcd": lo.lovasz_loss(logits_pcd, labels, classes=setup.lovasz_classes),
        "pi": lo.pixel_interaction_loss(probs_pcd, probs_img, void),
    }


def train_epoch(model: PathfinderModel, samples, setup: TrainSetup, optimizers, epoch: int):
    """One pass over the dataset; returns the mean total loss and per-term means."""
    if not samples:
        raise ValueError("dataset is empty")
    model.train()
    rng = np.random.default_rng((setup.seed + 1) * 1_000_003 + epoch)
    order = rng.permutation(len(samples))
    sums = {"total": 0.0, "focal": 0.0, "lovasz_img": 0.0, "vf": 0.0, "lovasz_pcd": 0.0, "pi": 0.0}
    batches = 0
    for lo_idx in range(0, len(order), setup.batch_size):
        batch = [samples[i] for i in order[lo_idx : lo_idx + setup.batch_size]]
        img, ras, void, labels = _stack_batch(batch)
        logits_img, logits_pcd = model.forward_batch(ag.Tensor(img), ag.Tensor(ras))
        terms = compute_losses(logits_img, logits_pcd, labels, void, setup, epoch)
        for name, t in terms.items():
            if not np.isfinite(t.values).all():
                raise RuntimeError(f"loss term '{name}' is not finite at epoch {epoch}")
        total = lo.total_loss(*terms.values())
        model.zero_grad()
        total.backward()
        optimizers["camera"].step(epoch)
        optimizers["lidar"].step(epoch)
        ag.clip_latent_weights(model.parameters())
        sums["total"] += float(total.values)
        for name, t in terms.items():
            sums[name] += float(t.values)
        batches += 1
    return {k: v / batches for k, v in sums.items()}


def infer(model: PathfinderModel, sample: Sample):
    """Eval-mode masks and per-pixel confidences for both streams."""
    model.eval()
    logits_img, logits_pcd = model.forward(sample.image, sample.raster, sample.void_mask)
    conf_img = _softmax_np(logits_img.values)
    conf_pcd = _softmax_np(logits_pcd.values)
    return conf_img.argmax(axis=0), conf_pcd.argmax(axis=0), (conf_img, conf_pcd)


def _softmax_np(logits):
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def evaluate(model: PathfinderModel, samples, road_class: int = 1):
    """Confusions and Table-style rows (mAcc/mIoU/RoadAcc/RoadIoU) per stream."""
    c = model.config.classes
    conf_img, conf_pcd = ConfusionMatrix(c), ConfusionMatrix(c)
    for s in samples:
        mask_img, mask_pcd, _ = infer(model, s)
        conf_img.update(s.labels, mask_img)
        conf_pcd.update(s.labels, mask_pcd)
    return {
        "image": segmentation_scores(conf_img, road_class),
        "pcd": segmentation_scores(conf_pcd, road_class),
        "conf_img": conf_img,
        "conf_pcd": conf_pcd,
    }
