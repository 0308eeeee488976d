"""Feed-forward multi-frame network for pointmaps, depth, cameras, and motion.

A sequence of frames is tokenized per frame (patch embedding plus a learned
per-patch position table shared by all frames), prefixed with one camera
token and a few register tokens, and processed by an alternating stack of
frame-local and global self-attention blocks.  Nothing encodes the frame
index except that the first frame receives its own learned camera/register
token set, so the remaining frames are interchangeable: permuting them
permutes the outputs.

Dense heads read patch tokens from two tap depths of the stack and fuse them
DPT-style.  The motion head is architecturally the point head without the
uncertainty branch, which lets point-head weights be copied verbatim so both
heads compute bit-identical 3D values until training moves them apart.

Camera poses are encoded as 9 numbers: unit quaternion (w >= 0), translation,
and the field-of-view pair.  The principal point is deliberately absent; the
intrinsic conditioning consumes (fx / W, fy / W, py / H) and nothing reads
px, so predictions are exactly independent of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import Extrinsics, Intrinsics


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    patch_size: int = 8
    dim: int = 96
    depth: int = 2  # local/global block pairs
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_registers: int = 4
    taps: tuple[int, int] = (1, 3)  # block indices feeding the dense heads
    head_channels: int = 64
    camera_head_depth: int = 4

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image size must be a multiple of the patch size")
        if self.dim % self.num_heads:
            raise ValueError("dim must divide evenly into heads")
        if len(self.taps) != 2:
            raise ValueError("dense heads read exactly two tap depths")
        if any(t < 0 or t >= 2 * self.depth for t in self.taps):
            raise ValueError(f"tap indices {self.taps} out of range for "
                             f"{2 * self.depth} blocks")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block; batch elements never mix."""

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class CameraHead(nn.Module):
    """Self-attention over per-frame camera tokens, then a 9-number readout.

    The identity quaternion is added to the raw quaternion before
    normalization, so an untrained head starts near the identity rotation.
    """

    def __init__(self, dim, num_heads, depth):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(dim, num_heads, mlp_ratio=4.0) for _ in range(depth))
        self.out = nn.Linear(dim, 9)
        nn.init.zeros_(self.out.bias)

    def forward(self, cam_tokens):
        x = cam_tokens[None]  # frames attend to each other: one "batch"
        for blk in self.blocks:
            x = blk(x)
        raw = self.out(x[0])
        quat = raw[:, :4] + raw.new_tensor([1.0, 0.0, 0.0, 0.0])
        quat = quat / torch.linalg.vector_norm(quat, dim=-1, keepdim=True)
        return torch.cat([quat, raw[:, 4:]], dim=-1)


class DenseHead(nn.Module):
    """DPT-style decoder: two tap projections, fusion convs, upsample, readout.

    ``out_channels`` dense values per pixel, plus an optional single-channel
    uncertainty branch mapped to sigma = 1 + exp(raw) > 1.
    """

    def __init__(self, dim, channels, patch_size, grid, out_channels,
                 with_confidence):
        super().__init__()
        self.grid = grid
        self.patch_size = patch_size
        self.proj = nn.ModuleList([nn.Linear(dim, channels) for _ in range(2)])
        self.fuse1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.fuse2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()
        self.out_values = nn.Conv2d(channels, out_channels, 1)
        self.out_conf = nn.Conv2d(channels, 1, 1) if with_confidence else None

    def trunk(self, taps):
        gh, gw = self.grid
        feats = []
        for linear, tok in zip(self.proj, taps):
            f, n, _ = tok.shape
            feats.append(linear(tok).transpose(1, 2).reshape(f, -1, gh, gw))
        x = feats[0] + feats[1]
        x = self.act(self.fuse1(x))
        x = x + self.act(self.fuse2(x))
        x = nn.functional.interpolate(x, scale_factor=self.patch_size,
                                      mode="bilinear", align_corners=False)
        return self.act(self.refine(x))

    def forward(self, taps):
        x = self.trunk(taps)
        values = self.out_values(x)
        if self.out_conf is None:
            return values, None
        sigma = 1.0 + torch.exp(self.out_conf(x))
        return values, sigma[:, 0]


@dataclass
class PredictionBundle:
    """Per-frame outputs; maps are channel-last, frame 0 is the coordinate frame."""

    points: torch.Tensor  # (F, H, W, 3) positions at their own time
    point_conf: torch.Tensor  # (F, H, W), > 1
    depth: torch.Tensor  # (F, H, W)
    depth_conf: torch.Tensor  # (F, H, W), > 1
    camera: torch.Tensor  # (F, 9)
    motion: torch.Tensor | None  # (F, H, W, 3) displacement to the query time
    query_index: int | None

    def points_at_query(self) -> torch.Tensor:
        """X^t_q = X^t_t + M^t_q, positions of every pixel at the query time."""
        if self.motion is None:
            raise ValueError("no motion predicted: forward ran without a query")
        return self.points + self.motion


class DenseTracker(nn.Module):
    """The full network; one forward processes one frame sequence."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(3, c.dim, kernel_size=c.patch_size,
                                     stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(c.num_patches, c.dim))
        # frame 0 is the reference: it gets its own camera/register tokens
        self.camera_token_first = nn.Parameter(torch.zeros(1, c.dim))
        self.camera_token_rest = nn.Parameter(torch.zeros(1, c.dim))
        self.registers_first = nn.Parameter(torch.zeros(c.num_registers, c.dim))
        self.registers_rest = nn.Parameter(torch.zeros(c.num_registers, c.dim))
        self.intrinsic_embed = nn.Linear(3, c.dim)
        # zero-init: enabling the query embedding is a no-op until trained
        self.query_embed = nn.Parameter(torch.zeros(c.dim))
        # motion-head context: pooled query-frame features, gated elementwise
        # by the query embedding so a zero embedding still silences every
        # query pathway; bias-free so the gate alone controls the branch
        self.query_context = nn.ModuleList(
            nn.Linear(c.dim, c.dim, bias=False) for _ in c.taps)

        self.local_blocks = nn.ModuleList(
            Block(c.dim, c.num_heads, c.mlp_ratio) for _ in range(c.depth))
        self.global_blocks = nn.ModuleList(
            Block(c.dim, c.num_heads, c.mlp_ratio) for _ in range(c.depth))

        self.camera_head = CameraHead(c.dim, c.num_heads, c.camera_head_depth)
        self.point_head = DenseHead(c.dim, c.head_channels, c.patch_size,
                                    c.grid, 3, with_confidence=True)
        self.depth_head = DenseHead(c.dim, c.head_channels, c.patch_size,
                                    c.grid, 1, with_confidence=True)
        self.motion_head = DenseHead(c.dim, c.head_channels, c.patch_size,
                                     c.grid, 3, with_confidence=False)

        for p in (self.pos_embed, self.camera_token_first, self.camera_token_rest,
                  self.registers_first, self.registers_rest):
            nn.init.normal_(p, std=0.02)

    @property
    def num_prefix(self) -> int:
        return 1 + self.config.num_registers

    def tokenize(self, images: torch.Tensor, intrinsic_feats: torch.Tensor,
                 query_index: int | None) -> torch.Tensor:
        """Initial token grid (F, prefix + patches, dim)."""
        f = images.shape[0]
        if images.shape[2] != self.config.height or images.shape[3] != self.config.width:
            raise ValueError(f"expected {self.config.height}x{self.config.width} "
                             f"input, got {tuple(images.shape[2:])}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (F, N, D)
        x = x + self.pos_embed
        x = x + self.intrinsic_embed(intrinsic_feats)[:, None, :]
        if query_index is not None:
            bump = torch.zeros(f, 1, 1, dtype=x.dtype, device=x.device)
            bump[query_index] = 1.0
            x = x + bump * self.query_embed
        cam = torch.cat([self.camera_token_first,
                         self.camera_token_rest.expand(f - 1, -1)])[:, None, :]
        regs = torch.cat([self.registers_first[None],
                          self.registers_rest[None].expand(f - 1, -1, -1)])
        return torch.cat([cam, regs, x], dim=1)

    def aggregate(self, tokens: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Alternating frame-local / global attention; collects tap features."""
        f, t, d = tokens.shape
        taps = {}
        idx = 0
        for local_blk, global_blk in zip(self.local_blocks, self.global_blocks):
            tokens = local_blk(tokens)  # frames are batch entries: no mixing
            if idx in self.config.taps:
                taps[idx] = tokens
            idx += 1
            tokens = global_blk(tokens.reshape(1, f * t, d)).reshape(f, t, d)
            if idx in self.config.taps:
                taps[idx] = tokens
            idx += 1
        ordered = [taps[i] for i in self.config.taps]
        return tokens, ordered

    def forward(self, images: torch.Tensor, intrinsic_feats: torch.Tensor,
                query_index: int | None = None) -> PredictionBundle:
        """images (F, 3, H, W); intrinsic_feats (F, 3) = (fx/W, fy/W, py/H).

        With a query index the motion head runs: the query embedding marks
        that frame's patch tokens, and the same embedding gates a pooled
        query-frame context added to the motion head's tapped features.
        Without a query index, motion is None.
        """
        tokens = self.tokenize(images, intrinsic_feats, query_index)
        tokens, tap_feats = self.aggregate(tokens)
        patch_taps = [t[:, self.num_prefix:, :] for t in tap_feats]

        camera = self.camera_head(tokens[:, 0, :])
        points, point_conf = self.point_head(patch_taps)
        depth, depth_conf = self.depth_head(patch_taps)
        motion = None
        if query_index is not None:
            motion_taps = []
            for proj, tap in zip(self.query_context, patch_taps):
                pooled = tap[query_index].mean(dim=0)
                motion_taps.append(tap + proj(pooled * self.query_embed))
            motion_vals, _ = self.motion_head(motion_taps)
            motion = motion_vals.permute(0, 2, 3, 1)
        return PredictionBundle(
            points=points.permute(0, 2, 3, 1),
            point_conf=point_conf,
            depth=depth[:, 0],
            depth_conf=depth_conf,
            camera=camera,
            motion=motion,
            query_index=query_index,
        )

    def copy_point_head_to_motion(self) -> None:
        """Clone the point head's dense trunk and value weights into the motion head.

        Both heads share the architecture up to the uncertainty branch, so
        right after this call they produce bit-identical 3D values.
        """
        src, dst = self.point_head, self.motion_head
        with torch.no_grad():
            for s_lin, d_lin in zip(src.proj, dst.proj):
                d_lin.weight.copy_(s_lin.weight)
                d_lin.bias.copy_(s_lin.bias)
            for name in ("fuse1", "fuse2", "refine", "out_values"):
                s_mod, d_mod = getattr(src, name), getattr(dst, name)
                d_mod.weight.copy_(s_mod.weight)
                d_mod.bias.copy_(s_mod.bias)


def intrinsic_features(cameras: list[Intrinsics]) -> torch.Tensor:
    """Conditioning triple (fx / W, fy / W, py / H) per frame.

    The horizontal principal point is intentionally not part of the features,
    keeping predictions exactly independent of it.
    """
    rows = [(K.fx / K.width, K.fy / K.width, K.py / K.height) for K in cameras]
    return torch.tensor(rows, dtype=torch.get_default_dtype())


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def encode_camera(pose: Extrinsics, K: Intrinsics) -> np.ndarray:
    """9-number target: quaternion(4) + translation(3) + fov pair(2).

    fov_x = 2 atan(W / (2 fx)), fov_y likewise with H and fy.
    """
    quat = rotation_to_quaternion(pose.rotation)
    fov_x = 2.0 * math.atan(K.width / (2.0 * K.fx))
    fov_y = 2.0 * math.atan(K.height / (2.0 * K.fy))
    return np.concatenate([quat, pose.translation, [fov_x, fov_y]])


def decode_camera(vec: np.ndarray, width: int, height: int) -> tuple[Extrinsics, Intrinsics]:
    """Inverse of encode_camera; the principal point is taken at the image center."""
    vec = np.asarray(vec, dtype=np.float64)
    R = quaternion_to_rotation(vec[:4])
    pose = Extrinsics(rotation=R, translation=vec[4:7])
    fov_x, fov_y = vec[7], vec[8]
    if not (0.0 < fov_x < math.pi and 0.0 < fov_y < math.pi):
        raise ValueError(f"field of view out of range: ({fov_x}, {fov_y})")
    K = Intrinsics(
        fx=width / (2.0 * math.tan(fov_x / 2.0)),
        fy=height / (2.0 * math.tan(fov_y / 2.0)),
        px=width / 2.0,
        py=height / 2.0,
        width=width,
        height=height,
    )
    return pose, K
