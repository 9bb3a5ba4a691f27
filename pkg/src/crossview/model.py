"""Full cross-view pose network: two encoders, projectors, localization and orientation decoders."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .decoders import LocalizationDecoder, OrientationDecoder, PoseEstimate, extract_pose
from .encoders import AerialProjector, Backbone, BackboneConfig, GroundProjector, encode_ground
from .layers import Module
from .matching import OrientationPrior, check_roll, match
from .tensor import ShapeError, Tensor, io, no_grad


@dataclass
class ModelConfig:
    L: int = 64
    ground_h: int = 16
    ground_w: int = 64
    n1: int = 4
    K: int = 4
    R: int = 8
    c1: int = 16
    ground_backbone: BackboneConfig = field(
        default_factory=lambda: BackboneConfig(strides=(2, 2, 1, 1), pad_mode="circular_horizontal")
    )
    aerial_backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(strides=(2, 2, 2, 1)))
    # levels (1-based) whose LMU uses matching scores; empty list means all K levels
    lmu_levels: tuple[int, ...] = ()
    use_omu: bool = True
    normalize: bool = True
    ori_widths: tuple[int, ...] = (64, 32, 16, 16)
    seed: int = 0

    @property
    def matching_levels(self) -> tuple[int, ...]:
        return tuple(self.lmu_levels) if self.lmu_levels else tuple(range(1, self.K + 1))

    @property
    def ground_feat_hw(self) -> tuple[int, int]:
        s = self.ground_backbone.total_stride
        return -(-self.ground_h // s), -(-self.ground_w // s)

    def c_block(self, k: int) -> int:
        """C'_k: channels per ground column at level k (halving per level)."""
        return self.c1 >> (k - 1)

    def c_desc(self, k: int) -> int:
        """C^A_k = W' * C'_k."""
        return self.ground_feat_hw[1] * self.c_block(k)

    def n(self, k: int) -> int:
        return self.n1 << (k - 1)

    def validate(self) -> None:
        if self.n(self.K) * 2 != self.L:
            raise ShapeError(f"N_K = N1 * 2^(K-1) = {self.n(self.K)} must equal L/2 = {self.L // 2}")
        if self.c_block(self.K) < 1 or self.c1 % (1 << (self.K - 1)):
            raise ShapeError(f"C'_1={self.c1} cannot halve over {self.K} levels")
        for k in range(1, self.K + 1):
            check_roll(self.c_desc(k), self.c_block(k), self.R)
        bad = [k for k in self.matching_levels if not 1 <= k <= self.K]
        if bad:
            raise ShapeError(f"matching levels {bad} outside 1..{self.K}")


@dataclass
class ModelOutput:
    D: Tensor
    Y: Tensor
    volumes: dict[int, Tensor]
    maxmaps: list
    ground_desc: dict[int, Tensor]
    aerial_desc: list[Tensor]


def _stage_resolutions(size: int, strides) -> list[int]:
    out, s = [], size
    for st in strides:
        s = -(-s // st)
        out.append(s)
    return out


class CrossViewModel(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.ground_enc = Backbone(rng, cfg.ground_backbone)
        self.aerial_enc = Backbone(rng, cfg.aerial_backbone)
        h_feat, _ = cfg.ground_feat_hw
        c_feat = cfg.ground_backbone.channels[-1]
        self.ground_proj = [GroundProjector(rng, c_feat, cfg.c_block(k), h_feat) for k in range(1, cfg.K + 1)]
        res = _stage_resolutions(cfg.L, cfg.aerial_backbone.strides)
        self.aerial_res = res
        self.aerial_proj = AerialProjector(rng, res[-1], cfg.aerial_backbone.channels[-1], cfg.n1, cfg.c_desc(1))
        self.skip_index = [self._skip_stage(2 * cfg.n(k)) for k in range(1, cfg.K)]
        self.ori_skip_index = self._skip_stage(4 * cfg.n1)
        c_a = [cfg.c_desc(k) for k in range(1, cfg.K + 1)]
        skip_ch = [cfg.aerial_backbone.channels[i] for i in self.skip_index]
        self.loc = LocalizationDecoder(rng, c_a, skip_ch, cfg.R, set(cfg.matching_levels), cfg.normalize)
        self.ori = OrientationDecoder(
            rng, c_a[0], cfg.R, cfg.n1, cfg.L, cfg.aerial_backbone.channels[self.ori_skip_index],
            cfg.use_omu, cfg.normalize, cfg.ori_widths,
        )

    def _skip_stage(self, resolution: int) -> int:
        hits = [i for i, r in enumerate(self.aerial_res) if r == resolution]
        if not hits:
            raise ShapeError(f"aerial encoder has no stage at resolution {resolution} (stages: {self.aerial_res})")
        return hits[-1]

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def forward(self, ground, aerial, fov: float = 360.0, prior: OrientationPrior | None = None) -> ModelOutput:
        """``ground``: B x H x W' x 3 in [0, 1] (W' < W for limited FoV); ``aerial``: B x L x L x 3."""
        cfg = self.cfg
        g = Tensor(np.asarray(ground, np.float32) - 0.5)
        a = Tensor(np.asarray(aerial, np.float32) - 0.5)
        if a.shape[1] != cfg.L or a.shape[2] != cfg.L:
            raise ShapeError(f"aerial image {a.shape[1:3]} does not match model L={cfg.L}")
        if g.shape[1] != cfg.ground_h:
            raise ShapeError(f"ground image height {g.shape[1]} != {cfg.ground_h}")
        gfeat = encode_ground(self.ground_enc, g, fov)
        afeats = self.aerial_enc(a)
        a1 = self.aerial_proj(afeats[-1])
        matching = set(cfg.matching_levels)
        need = set(matching) | ({1} if cfg.use_omu else set())
        gdesc = {k: self.ground_proj[k - 1](gfeat) for k in sorted(need)}
        volumes: dict[int, Tensor] = {}
        if 1 in need:
            volumes[1] = match(gdesc[1], a1, cfg.R)

        def build(k, a_k):
            if k not in matching:
                return None
            vol = match(gdesc[k], a_k, cfg.R)
            volumes[k] = vol
            return vol

        skips = [afeats[i] for i in self.skip_index]
        D, aerials, _, maxmaps = self.loc({1: volumes.get(1)} if 1 in matching else None, a1, skips, build, prior)
        Y = self.ori(volumes.get(1) if cfg.use_omu else None, a1, afeats[self.ori_skip_index])
        volumes = {k: v for k, v in volumes.items() if k in matching}
        return ModelOutput(D, Y, volumes, maxmaps, gdesc, aerials)

    __call__ = forward

    def predict(self, ground, aerial, fov: float = 360.0, prior: OrientationPrior | None = None,
                keep_maps: bool = False) -> list[PoseEstimate]:
        with no_grad():
            out = self.forward(ground, aerial, fov, prior)
        return [extract_pose(out.D.data[b], out.Y.data[b], keep_maps) for b in range(out.D.shape[0])]

    # checkpoints -----------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        cfgio.save(self.cfg, d / "model.cfg")
        lines = []
        for i, (name, t) in enumerate(sorted(self.parameters().items())):
            fname = f"param_{i:04d}.cvt"
            io.save(d / fname, t.data)
            lines.append(f"{name} = {fname} {'x'.join(map(str, t.shape))}\n")
        (d / "manifest.txt").write_text("".join(lines))

    def load_parameters(self, directory) -> None:
        d = Path(directory)
        params = self.parameters()
        seen = set()
        for line in (d / "manifest.txt").read_text().splitlines():
            if not line.strip():
                continue
            name, rest = (s.strip() for s in line.split("=", 1))
            fname, shape = rest.split()
            if name not in params:
                raise KeyError(f"checkpoint parameter {name!r} not in model")
            arr = io.load(d / fname)
            if arr.shape != params[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {params[name].shape}")
            params[name].data = arr
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")

    @classmethod
    def load(cls, directory) -> "CrossViewModel":
        cfg = cfgio.load(ModelConfig(), Path(directory) / "model.cfg")
        model = cls(cfg)
        model.load_parameters(directory)
        return model
