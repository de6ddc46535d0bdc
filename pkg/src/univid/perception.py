"""Frozen perception stack: per-frame embedding encoder and causal video autoencoder.

The frame encoder supplies the alignment targets for the backbone's vision
head; the autoencoder supplies the low-level latent space the diffusion
decoder operates in and the source-video conditioning for edits. Both are
pretrained on the synthetic corpus and frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import synthdata as sd
from .numerics import Tensor

FRAME_SIZE = 32
EMBED_DIM = 64
LATENT_CHANNELS = 4
LATENT_SIZE = 8
VALID_FRAME_COUNTS = (1, 8, 12)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    m = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if m == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / m)


def _check_video(video: np.ndarray, op: str) -> np.ndarray:
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[1] != 3 or video.shape[2:] != (FRAME_SIZE, FRAME_SIZE):
        raise nx.ShapeError(op, f"expected [T, 3, {FRAME_SIZE}, {FRAME_SIZE}], got {video.shape}")
    return video


# -- frame encoder ------------------------------------------------------------


@dataclass
class FrameEncoderConfig:
    patch: int = 8
    dim: int = EMBED_DIM
    blocks: int = 2
    heads: int = 4
    seed: int = 101


class FrameEncoder(nx.Module):
    """Patchify -> linear embed -> transformer blocks -> mean pool -> unit vector."""

    def __init__(self, config: FrameEncoderConfig | None = None):
        super().__init__()
        self.config = config or FrameEncoderConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        n_patches = (FRAME_SIZE // c.patch) ** 2
        patch_dim = 3 * c.patch * c.patch
        self.patch_embed = nx.Linear(patch_dim, c.dim, rng)
        self.pos = nx.Parameter(nx.normal_init(rng, (n_patches, c.dim), 0.02))
        self.blocks = nx.ModuleList([nx.TransformerBlock(c.dim, c.heads, rng) for _ in range(c.blocks)])
        self.out = nx.Linear(c.dim, c.dim, rng)

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        t = frames.shape[0]
        p = self.config.patch
        g = FRAME_SIZE // p
        x = frames.reshape(t, 3, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)  # [T, g, g, 3, p, p]
        return x.reshape(t, g * g, 3 * p * p)

    def embed_frames(self, frames: np.ndarray) -> Tensor:
        """[N, 3, 32, 32] -> unit-norm [N, dim]; no frame-count restriction."""
        x = Tensor(self._patchify(np.asarray(frames, dtype=np.float32)))
        h = nx.add(self.patch_embed(x), self.pos.tensor)
        for blk in self.blocks:
            h = blk(h)
        pooled = nx.mean(h, axis=1)
        return nx.l2_normalize(self.out(pooled))

    def encode_frames(self, video: np.ndarray) -> Tensor:
        video = _check_video(video, "encode_frames")
        if video.shape[0] not in VALID_FRAME_COUNTS:
            raise nx.ShapeError("encode_frames", f"frame count {video.shape[0]} not in {VALID_FRAME_COUNTS}")
        with nx.no_grad():
            return self.embed_frames(video)


def augment_frame(frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One-pixel shift + noise + brightness jitter + occasional box blur.

    The +-1 px shift keeps the embedding smooth under small displacements
    (motion is 1 px/frame), while different scenes are still pushed apart."""
    x = frame.copy()
    dx, dy = rng.integers(-1, 2, size=2)
    x = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")[:, 1 + dy:1 + dy + FRAME_SIZE, 1 + dx:1 + dx + FRAME_SIZE]
    if rng.random() < 0.3:
        p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
        x = sum(p[:, 1 + i:1 + i + FRAME_SIZE, 1 + j:1 + j + FRAME_SIZE]
                for i in (-1, 0, 1) for j in (-1, 0, 1)) / 9.0
    x = x * (1.0 + 0.1 * rng.standard_normal()) + 0.05 * rng.standard_normal()
    x = x + 0.03 * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def contrastive_loss(encoder: FrameEncoder, frames_a: np.ndarray, frames_b: np.ndarray,
                     temperature: float = 0.15) -> Tensor:
    """NT-Xent over two views per scene."""
    b = frames_a.shape[0]
    z = encoder.embed_frames(np.concatenate([frames_a, frames_b], axis=0))
    sim = nx.mul(nx.matmul(z, nx.swap_axes(z, 0, 1)), 1.0 / temperature)
    self_mask = np.full((2 * b, 2 * b), 0.0, dtype=np.float32)
    np.fill_diagonal(self_mask, -1e30)
    sim = nx.add(sim, Tensor(self_mask))
    targets = np.concatenate([np.arange(b) + b, np.arange(b)])
    return nx.cross_entropy(sim, targets)


def _contrastive_batch(rng: np.random.Generator, batch: int, frames: int):
    """Hard-negative composition: groups share color and background (and half
    of them everything except shape), so separating them requires shape and
    position features rather than the dominant color shortcut."""
    specs = []
    while len(specs) < batch:
        color = str(rng.choice(sd.COLOR_NAMES))
        background = str(rng.choice(sd.BACKGROUND_NAMES))
        base = sd.random_spec(rng)
        shape_only = rng.random() < 0.5
        for _ in range(min(4, batch - len(specs))):
            s = sd.random_spec(rng)
            if shape_only:
                specs.append(type(s)(shape=s.shape, color=color, motion=base.motion,
                                     background=background, size=base.size, seed=base.seed))
            else:
                specs.append(type(s)(shape=s.shape, color=color, motion=s.motion,
                                     background=background, size=s.size, seed=s.seed))
    frames_out = []
    for s in specs:
        t = int(rng.integers(0, frames))
        frames_out.append(sd.render(s, t + 1)[t])
    return frames_out


def pretrain_frame_encoder(*, steps: int = 800, batch: int = 24, lr: float = 2e-3,
                           seed: int = 11, frames: int = 8,
                           log=None) -> tuple[FrameEncoder, list[float]]:
    """Contrastive pretraining on random scenes; returns the frozen encoder."""
    encoder = FrameEncoder(FrameEncoderConfig(seed=seed))
    rng = np.random.default_rng(seed + 1)
    opt = nx.AdamW(encoder.parameters(), lr=lr, weight_decay=1e-4)
    history = []
    for step in range(steps):
        base = _contrastive_batch(rng, batch, frames)
        views_a = [augment_frame(f, rng) for f in base]
        views_b = [augment_frame(f, rng) for f in base]
        opt.zero_grad()
        loss = contrastive_loss(encoder, np.stack(views_a), np.stack(views_b))
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log and step % 100 == 0:
            log(f"encoder step {step}: loss {loss.item():.4f}")
    encoder.freeze()
    return encoder, history


# -- causal video autoencoder ----------------------------------------------------


@dataclass
class VaeConfig:
    spatial_patch: int = 4
    hidden: int = 64
    temporal_hidden: int = 128
    seed: int = 202


class CausalVideoVae(nx.Module):
    """Spatial 4x downsample, temporal causal stride-2 compression.

    Encoder latent frame k sees input frames 2k-2 .. 2k+1 only (left-padded),
    so perturbing input frame j never changes latents with 2k+1 < j. All
    internal tensors are time-major [T, B, 8, 8, C] so whole batches run in
    one graph.
    """

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        p = c.spatial_patch
        patch_dim = 3 * p * p
        ctx = 9 * c.hidden
        self.enc_embed = nx.Linear(patch_dim, c.hidden, rng)
        self.enc_spatial = nx.Linear(ctx, c.hidden, rng)
        self.enc_temporal = nx.Linear(4 * c.hidden, c.temporal_hidden, rng)
        self.enc_out = nx.Linear(c.temporal_hidden, LATENT_CHANNELS, rng)
        self.dec_embed = nx.Linear(LATENT_CHANNELS, c.hidden, rng)
        # decoder positions see their 3x3 context plus a global scene summary,
        # which carries flat colors without spending per-position capacity
        self.dec_spatial = nx.Linear(ctx + c.hidden, c.hidden, rng)
        self.dec_temporal = nx.Linear(2 * c.hidden, c.temporal_hidden, rng)
        self.dec_out = nx.Linear(c.temporal_hidden, 2 * patch_dim, rng)
        # per-channel latent statistics, measured after pretraining
        self.latent_mean = nx.Parameter(np.zeros(LATENT_CHANNELS, dtype=np.float32), trainable=False)
        self.latent_std = nx.Parameter(np.ones(LATENT_CHANNELS, dtype=np.float32), trainable=False)

    # layout helpers: [T, B, 8, 8, C]

    def _space_to_patches(self, videos: np.ndarray) -> np.ndarray:
        """[B, T, 3, 32, 32] -> [T, B, g, g, patch_dim]"""
        p = self.config.spatial_patch
        g = FRAME_SIZE // p
        b, t = videos.shape[:2]
        x = videos.reshape(b, t, 3, g, p, g, p).transpose(1, 0, 3, 5, 2, 4, 6)
        return x.reshape(t, b, g, g, 3 * p * p)

    def _spatial_context(self, h: Tensor) -> Tensor:
        """3x3 neighborhood concat along channels: [T,B,8,8,C] -> [T,B,8,8,9C]."""
        g = LATENT_SIZE
        padded = nx.pad_axis(nx.pad_axis(h, 2, 1, 1), 3, 1, 1)
        shifts = [padded[:, :, 1 + i:1 + i + g, 1 + j:1 + j + g, :]
                  for i in (-1, 0, 1) for j in (-1, 0, 1)]
        return nx.concat(shifts, axis=-1)

    def _temporal_windows(self, h: Tensor, t: int) -> Tensor:
        """Causal stride-2 windows over axis 0: frames 2k-2 .. 2k+1 per latent k."""
        t_out = (t + 1) // 2
        right = max(0, 2 * t_out - t)
        padded = nx.pad_axis(h, 0, 2, right)
        rows = []
        for off in range(4):
            idx = 2 * np.arange(t_out) + off
            rows.append(nx.take(padded, idx))
        return nx.concat(rows, axis=-1)

    def encode_batch(self, videos: np.ndarray) -> Tensor:
        """[B, T, 3, 32, 32] -> [B, T', 4, 8, 8]"""
        videos = np.asarray(videos, dtype=np.float32)
        t = videos.shape[1]
        h = nx.gelu(self.enc_embed(Tensor(self._space_to_patches(videos))))
        h = nx.gelu(self.enc_spatial(self._spatial_context(h)))
        h = self._temporal_windows(h, t)
        h = nx.gelu(self.enc_temporal(h))
        z = self.enc_out(h)  # [T', B, 8, 8, 4]
        return nx.transpose(z, (1, 0, 4, 2, 3))

    def decode_batch(self, latents: Tensor | np.ndarray, frames: int | None = None) -> Tensor:
        """[B, T', 4, 8, 8] -> [B, frames, 3, 32, 32]"""
        if not isinstance(latents, Tensor):
            latents = Tensor(np.asarray(latents, dtype=np.float32))
        b, t_lat = latents.shape[:2]
        frames = frames if frames is not None else 2 * t_lat
        if (frames + 1) // 2 != t_lat:
            raise nx.ShapeError("vae_decode", f"{frames} frames incompatible with {t_lat} latent frames")
        h = nx.transpose(latents, (1, 0, 3, 4, 2))  # [T', B, 8, 8, 4]
        h = nx.gelu(self.dec_embed(h))
        gmean = nx.mean(h, axis=(2, 3), keepdims=True)
        gtile = nx.add(nx.mul(h, 0.0), gmean)  # broadcast the summary to the grid
        h = nx.gelu(self.dec_spatial(nx.concat([self._spatial_context(h), gtile], axis=-1)))
        padded = nx.pad_axis(h, 0, 1, 0)
        window = nx.concat([nx.take(padded, np.arange(t_lat)), nx.take(padded, np.arange(t_lat) + 1)], axis=-1)
        h = nx.gelu(self.dec_temporal(window))
        out = self.dec_out(h)  # [T', B, 8, 8, 2 * patch_dim]
        p = self.config.spatial_patch
        g = LATENT_SIZE
        out = nx.reshape(out, (t_lat, b, g, g, 2, 3, p, p))
        out = nx.transpose(out, (1, 0, 4, 5, 2, 6, 3, 7))  # [B, T', 2, 3, g, p, g, p]
        video = nx.reshape(out, (b, 2 * t_lat, 3, FRAME_SIZE, FRAME_SIZE))
        if frames != 2 * t_lat:
            video = video[:, :frames]
        return video

    def encode(self, video: np.ndarray) -> Tensor:
        video = _check_video(video, "vae_encode")
        t = video.shape[0]
        if t not in VALID_FRAME_COUNTS:
            raise nx.ShapeError("vae_encode", f"frame count {t} not in {VALID_FRAME_COUNTS}")
        return self.encode_batch(video[None])[0]

    def decode(self, latent: Tensor | np.ndarray, frames: int | None = None) -> Tensor:
        if not isinstance(latent, Tensor):
            latent = Tensor(np.asarray(latent, dtype=np.float32))
        if latent.ndim != 4 or latent.shape[1] != LATENT_CHANNELS or latent.shape[2:] != (LATENT_SIZE, LATENT_SIZE):
            raise nx.ShapeError("vae_decode", f"expected [T', {LATENT_CHANNELS}, {LATENT_SIZE}, {LATENT_SIZE}], got {latent.shape}")
        ex = nx.reshape(latent, (1, *latent.shape))
        return self.decode_batch(ex, frames=frames)[0]

    def reconstruct(self, video: np.ndarray) -> Tensor:
        return self.decode(self.encode(video), frames=np.asarray(video).shape[0])

    # latent normalization for the flow-matching space

    def set_latent_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.latent_mean.tensor.data = np.asarray(mean, dtype=np.float32)
        self.latent_std.tensor.data = np.asarray(std, dtype=np.float32)

    def normalize_latent(self, z: np.ndarray) -> np.ndarray:
        m = self.latent_mean.data.reshape(1, -1, 1, 1)
        s = self.latent_std.data.reshape(1, -1, 1, 1)
        return (z - m) / s

    def denormalize_latent(self, z: np.ndarray) -> np.ndarray:
        m = self.latent_mean.data.reshape(1, -1, 1, 1)
        s = self.latent_std.data.reshape(1, -1, 1, 1)
        return z * s + m

    def encode_normalized(self, video: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.normalize_latent(self.encode(video).numpy())


def _vae_batch(rng: np.random.Generator, batch: int, frames: int) -> np.ndarray:
    videos = []
    for _ in range(batch):
        spec = sd.random_spec(rng)
        if rng.random() < 0.1:
            spec = spec.without_object()
        videos.append(sd.render(spec, frames))
    return np.stack(videos)


def _edge_weights(videos: np.ndarray, boost: float = 3.0) -> np.ndarray:
    """Upweight pixels near spatial edges; flat regions train in a few steps."""
    g = np.zeros(videos.shape, np.float32)
    g[..., 1:, :] += np.abs(videos[..., 1:, :] - videos[..., :-1, :])
    g[..., :, 1:] += np.abs(videos[..., :, 1:] - videos[..., :, :-1])
    w = 1.0 + boost * (g.max(axis=-3, keepdims=True) > 0.02)
    return np.broadcast_to(w, videos.shape).astype(np.float32)


def pretrain_vae(*, steps: int = 4000, batch: int = 8, lr: float = 2e-3, seed: int = 21,
                 image_prob: float = 0.2, stat_videos: int = 64,
                 log=None) -> tuple[CausalVideoVae, list[float]]:
    """Edge-weighted pixel reconstruction, then freeze and record latent stats."""
    vae = CausalVideoVae(VaeConfig(seed=seed))
    rng = np.random.default_rng(seed + 1)
    opt = nx.AdamW(vae.parameters(), lr=lr, weight_decay=1e-5)
    history = []
    for step in range(steps):
        opt.lr = lr * (0.5 * (1.0 + np.cos(np.pi * step / steps))) + lr * 0.025
        frames = 1 if rng.random() < image_prob else 8
        videos = _vae_batch(rng, batch, frames)
        opt.zero_grad()
        rec = vae.decode_batch(vae.encode_batch(videos), frames=frames)
        d = nx.sub(rec, Tensor(videos))
        loss = nx.mean(nx.mul(nx.mul(d, d), Tensor(_edge_weights(videos))))
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log and step % 200 == 0:
            log(f"vae step {step}: loss {loss.item():.5f}")
    # measure latent statistics for the generative latent space
    lat = []
    with nx.no_grad():
        z = vae.encode_batch(_vae_batch(rng, stat_videos, 8)).numpy()
    lat = z.transpose(2, 0, 1, 3, 4).reshape(LATENT_CHANNELS, -1)
    vae.set_latent_stats(lat.mean(axis=1), lat.std(axis=1) + 1e-6)
    vae.freeze()
    return vae, history
