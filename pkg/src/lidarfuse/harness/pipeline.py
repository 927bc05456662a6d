"""End-to-end BEV pipeline: LiDAR branch, camera branch, fusion stages and dense heads."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .. import functional as F
from ..autograd import Tensor, concat, no_grad, upsample_nearest
from ..geometry import DenseBEVGrid, SparseVoxelSet, collapse_z, scatter_to_bev, voxelize
from ..lss import DepthNet, depth_logits, image_to_bev
from ..nn import Module, conv_weight, linear_weight, param
from ..sbdb import ImageBEVEncoder, SBDBBlock
from ..ssm import ScanParams
from ..svdb import DEFAULT_TAU, DilationEmbedding, DilationResult, MaskPredictor, dilate_and_refine, predict_foreground
from .degrade import Degradation, one_hot_noise, random_noise, spatial_misalignment
from .scene import IMAGE_CHANNELS, GenConfig, Scene

MODES = ("lidar_centric", "naive_concat")
LR_SCHEDULES = ("constant", "one_cycle")
POINT_FEATURES = 5  # mean intensity, mean xyz offset (in voxel units), voxel z level


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class PipelineConfig:
    mode: str = "lidar_centric"
    use_svdb: bool = True
    use_sbdb: bool = True
    stages: int = 2
    blocks_per_stage: int = 2
    tau: float = DEFAULT_TAU
    groups: int = 4
    channels: int = 8
    image_bev_channels: int = 4
    guide_channels: int = 4
    neck_channels: int = 16
    head_hidden: int = 8
    depth_prior_sigma_inv: float = 0.015  # inverse-depth std, 1/m
    heat_threshold: float = 0.3
    seed: int = 0
    # training
    steps: int = 200
    lr: float = 3e-3  # peak rate of the schedule
    lr_schedule: str = "constant"
    weight_decay: float = 1e-2
    grad_clip: float | None = None
    heat_loss_weight: float = 1.0
    svdb_loss_weight: float = 1.0
    scene: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if self.mode == "naive_concat":
            self.use_svdb = False
            self.use_sbdb = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "naive_concat" and (self.use_svdb or self.use_sbdb):
            raise ValueError("naive_concat replaces SVDB and SBDB with plain conv stages; both switches must be off")
        if self.stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("need at least one stage with one block")
        factor = 2**self.stages
        if self.scene.grid_nx % factor or self.scene.grid_ny % factor:
            raise ValueError(
                f"grid {self.scene.grid_nx}x{self.scene.grid_ny} is not divisible by 2^stages = {factor}"
            )
        if self.channels % self.groups:
            raise ValueError(f"{self.channels} channels are not divisible into {self.groups} groups")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")

    def replace(self, **kw) -> "PipelineConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return PipelineConfig(**vals)


class PlainBlock(Module):
    """Residual conv block with the same layout as SBDB, a 3×3 conv in place of the deformable one."""

    def __init__(self, channels: int, mlp_ratio: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv_w = conv_weight(rng, channels, channels, 3)
        self.conv_b = param(np.zeros(channels))
        self.ln1_g = param(np.ones(channels))
        self.ln1_b = param(np.zeros(channels))
        hidden = mlp_ratio * channels
        self.mlp_w1 = conv_weight(rng, hidden, channels, 1)
        self.mlp_b1 = param(np.zeros(hidden))
        self.mlp_w2 = conv_weight(rng, channels, hidden, 1)
        self.mlp_b2 = param(np.zeros(channels))
        self.ln2_g = param(np.ones(channels))
        self.ln2_b = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.conv_w, self.conv_b, padding=1)
        x = F.layer_norm(y, self.ln1_g, self.ln1_b, axis=0) + x
        h = F.conv2d(F.silu(F.conv2d(x, self.mlp_w1, self.mlp_b1)), self.mlp_w2, self.mlp_b2)
        return F.layer_norm(h, self.ln2_g, self.ln2_b, axis=0) + x


class DenseHead(Module):
    """3×3 conv, relu, 3×3 conv to one sigmoid channel."""

    def __init__(self, channels: int, hidden: int, prior: float, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w1 = conv_weight(rng, hidden, channels, 3)
        self.b1 = param(np.zeros(hidden))
        self.w2 = conv_weight(rng, 1, hidden, 3, gain=0.1)
        self.b2 = param(np.full(1, _logit(prior)))

    def __call__(self, x: Tensor) -> Tensor:
        h = F.relu(F.conv2d(x, self.w1, self.b1, padding=1))
        p = F.sigmoid(F.conv2d(h, self.w2, self.b2, padding=1))
        _, ny, nx = p.shape
        return p.reshape(ny, nx)


@dataclass
class SceneInputs:
    voxel_feats: np.ndarray  # V×POINT_FEATURES, rows of the 3-D voxel set
    voxel_coords: np.ndarray
    voxel_extent: tuple[int, int, int]
    image_feat: np.ndarray
    camera: object


@dataclass
class PipelineOutput:
    mask_prob: Tensor  # Y×X
    heat_prob: Tensor  # Y×X
    svdb_prob: Tensor | None
    dilation: DilationResult | None
    image_bev: DenseBEVGrid
    depth: Tensor
    lidar_bev: DenseBEVGrid


def init_depth_prior(net: DepthNet, centers: np.ndarray, sigma_inv: float) -> None:
    """Make depth logits a Gaussian log-likelihood in inverse depth around the image cue s.

    logit_d = (s / d - 1 / (2 d^2)) / sigma^2; the s^2 term is shared by all bins
    and cancels in the softmax.  Metric uncertainty therefore grows as d^2.
    """
    inv = 1.0 / centers
    w = np.zeros_like(net.depth_w.data)
    w[:, IMAGE_CHANNELS - 1, 0, 0] = inv / sigma_inv**2
    net.depth_w.data = w
    net.depth_b.data = -(inv**2) / (2 * sigma_inv**2)


class Pipeline(Module):
    def __init__(self, cfg: PipelineConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        seeds = iter(rng.integers(0, 2**31, size=64))
        C, Ci = cfg.channels, cfg.image_bev_channels
        self.geometry = cfg.scene.geometry
        self.voxel_config = cfg.scene.voxel_config
        self.bins = cfg.scene.bins
        self.point_w1 = linear_weight(rng, C, POINT_FEATURES)
        self.point_b1 = param(np.zeros(C))
        self.point_w2 = linear_weight(rng, C, C)
        self.point_b2 = param(np.zeros(C))
        self.depth_net = DepthNet(IMAGE_CHANNELS, Ci, self.bins.num_bins, seed=int(next(seeds)))
        init_depth_prior(self.depth_net, self.bins.centers(), cfg.depth_prior_sigma_inv)
        if cfg.mode == "naive_concat":
            self.fuse_w = conv_weight(rng, C, C + Ci, 3)
            self.fuse_b = param(np.zeros(C))
        if cfg.use_svdb:
            self.mask_predictor = MaskPredictor(Ci, C, seed=int(next(seeds)))
            self.mask_predictor.b2.data = np.full(1, _logit(0.1))
            self.dilation_embedding = DilationEmbedding(C, seed=int(next(seeds)))
            self.scan = ScanParams(C, seed=int(next(seeds)))
        if cfg.use_sbdb:
            self.image_encoder = ImageBEVEncoder(Ci, cfg.guide_channels, cfg.stages, seed=int(next(seeds)))
        self.down_w = [conv_weight(rng, C, C, 2) for _ in range(cfg.stages)]
        self.down_b = [param(np.zeros(C)) for _ in range(cfg.stages)]
        self.blocks = [
            [
                SBDBBlock(C, cfg.guide_channels, cfg.groups, seed=int(next(seeds)))
                if cfg.use_sbdb
                else PlainBlock(C, seed=int(next(seeds)))
                for _ in range(cfg.blocks_per_stage)
            ]
            for _ in range(cfg.stages)
        ]
        self.neck_w = conv_weight(rng, cfg.neck_channels, C * (cfg.stages + 1), 1)
        self.neck_b = param(np.zeros(cfg.neck_channels))
        self.mask_head = DenseHead(cfg.neck_channels, cfg.head_hidden, prior=0.5, seed=int(next(seeds)))
        self.heat_head = DenseHead(cfg.neck_channels, cfg.head_hidden, prior=0.05, seed=int(next(seeds)))

    # -- inputs ---------------------------------------------------------------

    def prepare(self, scene: Scene) -> SceneInputs:
        vox = voxelize(scene.points, self.voxel_config)
        size = np.array(self.voxel_config.voxel_size_m)
        nz = vox.grid_extent[2]
        feats = vox.features.data
        z_level = (vox.coords[:, 2:3] + 0.5) / nz
        rows = np.concatenate([feats[:, :1], feats[:, 1:4] / size, z_level], axis=1)
        return SceneInputs(rows, vox.coords, vox.grid_extent, np.asarray(scene.image_feat, np.float64), scene.camera)

    # -- branches -------------------------------------------------------------

    def lidar_voxels(self, inp: SceneInputs) -> SparseVoxelSet:
        h = F.relu(F.linear(Tensor(inp.voxel_feats), self.point_w1, self.point_b1))
        h = F.relu(F.linear(h, self.point_w2, self.point_b2))
        return collapse_z(SparseVoxelSet(h, inp.voxel_coords, inp.voxel_extent))

    def image_bev(self, inp: SceneInputs, degradation: Degradation | None = None, rng=None):
        img = Tensor(inp.image_feat)
        override = None
        if degradation is not None and not degradation.is_null:
            if degradation.kind == "one_hot_noise":
                with no_grad():
                    dist = F.softmax(depth_logits(img, self.depth_net), axis=0).data
                override = Tensor(one_hot_noise(dist, float(degradation.magnitude), rng))
            elif degradation.kind == "random_noise":
                with no_grad():
                    logits = depth_logits(img, self.depth_net).data
                override = F.softmax(Tensor(random_noise(logits, float(degradation.magnitude), rng)), axis=0)
        grid, depth = image_to_bev(img, self.depth_net, inp.camera, self.bins, self.geometry, override)
        if degradation is not None and degradation.kind == "spatial_misalignment" and not degradation.is_null:
            grid = DenseBEVGrid(Tensor(spatial_misalignment(grid.features.data, degradation.magnitude)), self.geometry)
        return grid, depth

    # -- forward --------------------------------------------------------------

    def forward(self, inp: SceneInputs, degradation: Degradation | None = None, rng=None) -> PipelineOutput:
        cfg = self.cfg
        voxels = self.lidar_voxels(inp)
        image_bev, depth = self.image_bev(inp, degradation, rng)
        svdb_prob = dilation = None
        raw = scatter_to_bev(voxels, self.geometry)
        if cfg.mode == "naive_concat":
            fused = concat([raw.features, image_bev.features], axis=0)
            x = F.relu(F.conv2d(fused, self.fuse_w, self.fuse_b, padding=1))
        elif cfg.use_svdb:
            fg = predict_foreground(image_bev, raw, self.mask_predictor, cfg.tau)
            dilation = dilate_and_refine(voxels, fg, self.dilation_embedding, self.scan)
            svdb_prob = fg.prob
            x = scatter_to_bev(dilation.refined, self.geometry).features
        else:
            x = raw.features
        lidar_bev = DenseBEVGrid(x, self.geometry)
        guides = self.image_encoder.pyramid(image_bev) if cfg.use_sbdb else None
        levels = [x]
        geom = self.geometry
        for s in range(cfg.stages):
            x = F.relu(F.conv2d(x, self.down_w[s], self.down_b[s], stride=2))
            geom = geom.downsampled(2)
            for block in self.blocks[s]:
                if cfg.use_sbdb:
                    x = block(DenseBEVGrid(x, geom), guides[2 ** (s + 1)]).features
                else:
                    x = block(x)
            levels.append(upsample_nearest(x, 2 ** (s + 1)))
        neck = F.relu(F.conv2d(concat(levels, axis=0), self.neck_w, self.neck_b))
        return PipelineOutput(self.mask_head(neck), self.heat_head(neck), svdb_prob, dilation, image_bev, depth, lidar_bev)

    def __call__(self, scene: Scene, degradation: Degradation | None = None, rng=None) -> PipelineOutput:
        return self.forward(self.prepare(scene), degradation, rng)

    def sbdb_blocks(self) -> list[tuple[int, int, SBDBBlock]]:
        if not self.cfg.use_sbdb:
            return []
        return [(s, b, blk) for s, stage in enumerate(self.blocks) for b, blk in enumerate(stage)]


def build_pipeline(cfg: PipelineConfig) -> Pipeline:
    return Pipeline(cfg)
