"""Procedural video clips for the five tasks, plus encoder feature precompute.

Every generator draws from ``np.random.default_rng(seed)`` only, so a
``(task, seed, count)`` triple always yields the same clips.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..readout import matrix_to_rot6d

TASKS = ("classify", "box_track", "point_track", "depth", "pose")
# direction classes come in reversal pairs: 0<->1, 2<->3
DIRECTIONS = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]])  # (dy, dx) per frame
REVERSED_CLASS = np.array([1, 0, 3, 2])


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    labels: dict = field(default_factory=dict)


def _background(rng, size, level=0.15):
    return rng.uniform(0.0, level, size=(size, size, 3))


def _classify_clip(rng, frames, size):
    """Two soft intensity ramps, red along x and green along y; one of them drifts.

    Ramp positions are drawn for the last frame and the history is built
    backwards from there, so the last frame has the same distribution for
    every class. Under the drifting ramp each pixel brightens or darkens
    steadily, which makes the direction a per-token temporal cue.
    """
    label = int(rng.integers(0, 4))
    speed = int(rng.integers(3, 5))
    last = rng.uniform(-size / 2, size / 2, 2)  # ramp starts (y, x) in the last frame
    noise = rng.uniform(0.0, 0.1, size=(size, size, 3))
    blue = rng.uniform(0.2, 0.8)
    coords = np.arange(size, dtype=float)
    step = DIRECTIONS[label] * speed
    clip = np.empty((frames, size, size, 3))
    for t in range(frames):
        y0, x0 = last - step * (frames - 1 - t)
        clip[t, ..., 0] = np.clip((coords - x0) / size, 0.0, 1.0)[None, :]
        clip[t, ..., 1] = np.clip((coords - y0) / size, 0.0, 1.0)[:, None]
        clip[t, ..., 2] = blue
        clip[t] = 0.9 * clip[t] + noise
    return SyntheticClip(clip, {"class": label, "speed": speed})


def _box_clip(rng, frames, size):
    """A rectangle bouncing inside the frame; the box is its exact extent."""
    h, w = rng.integers(6, 13, 2)
    pos = np.array([rng.uniform(0, size - h), rng.uniform(0, size - w)])
    vel = rng.uniform(-3.0, 3.0, 2)
    color = rng.uniform(0.6, 1.0, 3)
    bg = _background(rng, size)
    clip = np.empty((frames, size, size, 3))
    boxes = np.empty((frames, 4))
    masks = np.zeros((frames, size, size), dtype=bool)
    for t in range(frames):
        y, x = np.round(pos).astype(int)
        img = bg.copy()
        img[y:y + h, x:x + w] = color
        masks[t, y:y + h, x:x + w] = True
        clip[t] = img
        boxes[t] = [(x + w / 2) / size, (y + h / 2) / size, w / size, h / size]
        pos = pos + vel
        for k, extent in enumerate((h, w)):
            hi = size - extent
            if pos[k] < 0 or pos[k] > hi:
                vel[k] = -vel[k]
                pos[k] = np.clip(pos[k], 0, hi)
    return SyntheticClip(clip, {"boxes": boxes, "masks": masks})


def _point_clip(rng, frames, size, n_points):
    """A textured square slides across a static occluding bar.

    Query points sit on the square; they are visible unless covered by the
    bar or outside the image.
    """
    side = int(rng.integers(10, 15))
    texture = rng.uniform(0.4, 1.0, size=(side, side, 3))
    pos = np.array([rng.uniform(0, size - side), rng.uniform(0, size - side)])
    vel = rng.uniform(-2.5, 2.5, 2)
    bar_x = int(rng.integers(4, size - 8))
    bar_w = int(rng.integers(3, 6))
    offsets = rng.uniform(0.5, side - 0.5, size=(n_points, 2))  # (y, x) inside the square
    bg = _background(rng, size)
    clip = np.empty((frames, size, size, 3))
    tracks = np.empty((frames, n_points, 2))
    visible = np.empty((frames, n_points), dtype=bool)
    for t in range(frames):
        y, x = np.round(pos).astype(int)
        img = bg.copy()
        y0, x0 = max(y, 0), max(x, 0)
        y1, x1 = min(y + side, size), min(x + side, size)
        if y1 > y0 and x1 > x0:
            img[y0:y1, x0:x1] = texture[y0 - y:y1 - y, x0 - x:x1 - x]
        img[:, bar_x:bar_x + bar_w] = 0.05
        clip[t] = img
        py, px = y + offsets[:, 0], x + offsets[:, 1]
        tracks[t] = np.stack([px / size, py / size], axis=-1)
        inside = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        occluded = (px >= bar_x) & (px < bar_x + bar_w)
        visible[t] = inside & ~occluded
        pos = pos + vel
    return SyntheticClip(clip, {"tracks": np.clip(tracks, 0.0, 1.0), "visible": visible})


def _depth_clip(rng, frames, size):
    """A ground plane receding upward plus a square moving in depth.

    Brightness falls off as ``1 / depth`` so depth is visible in the pixels.
    """
    rows = np.linspace(8.0, 2.0, size)[:, None] * np.ones((1, size))
    tint = rng.uniform(0.7, 1.0, 3)
    grain = rng.uniform(0.9, 1.0, size=(size, size, 1))
    z = rng.uniform(2.5, 6.0)
    vz = rng.uniform(-0.4, 0.4)
    cy, cx = rng.uniform(10, size - 10, 2)
    clip = np.empty((frames, size, size, 3))
    depth = np.empty((frames, size, size))
    for t in range(frames):
        d = rows.copy()
        half = max(2, int(round(12.0 / z)))
        y, x = int(cy), int(cx)
        d[max(y - half, 0):y + half, max(x - half, 0):x + half] = z
        depth[t] = d
        clip[t] = np.clip(2.0 / d[..., None] * tint * grain, 0.0, 1.0)
        z = float(np.clip(z + vz, 1.5, 7.5))
    return SyntheticClip(clip, {"depth": depth})


def _texture_field(rng, waves=12):
    k = rng.normal(0.0, 0.35, size=(waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(waves, 3))
    amp = rng.uniform(0.5, 1.0, waves)

    def sample(y, x):
        arg = k[:, 0, None, None] * y + k[:, 1, None, None] * x
        out = np.stack([(amp[:, None, None] * np.sin(arg + phase[:, c, None, None])).sum(0) for c in range(3)], -1)
        return 0.5 + out / (2 * amp.sum())

    return sample


def _pose_clip(rng, frames, size, metres_per_pixel=0.01):
    """A downward camera gliding over a textured plane with yaw.

    Labels are per-frame deltas ``(dx, dy, dz, rot6d)`` relative to the
    previous frame; the first frame's delta is the identity.
    """
    sample = _texture_field(rng)
    pos = rng.uniform(-50, 50, 2)
    yaw = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 2.5, 2) * rng.choice([-1, 1], 2)
    yaw_rate = rng.uniform(-0.15, 0.15)
    grid = np.arange(size) - size / 2 + 0.5
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    clip = np.empty((frames, size, size, 3))
    deltas = np.zeros((frames, 9))
    deltas[0, 3:] = [1, 0, 0, 0, 1, 0]
    for t in range(frames):
        c, s = np.cos(yaw), np.sin(yaw)
        clip[t] = sample(pos[0] + c * gy - s * gx, pos[1] + s * gy + c * gx)
        if t + 1 < frames:
            step_world = np.array([speed[0], speed[1]])
            # express the step in the current camera frame
            local = np.array([c * step_world[0] + s * step_world[1], -s * step_world[0] + c * step_world[1]])
            rot = np.array([[np.cos(yaw_rate), -np.sin(yaw_rate), 0],
                            [np.sin(yaw_rate), np.cos(yaw_rate), 0], [0, 0, 1]])
            deltas[t + 1, :3] = [local[1] * metres_per_pixel, local[0] * metres_per_pixel, 0.0]
            deltas[t + 1, 3:] = matrix_to_rot6d(rot)
            pos = pos + step_world
            yaw = yaw + yaw_rate
    return SyntheticClip(np.clip(clip, 0.0, 1.0), {"pose": deltas})


def make_synthetic_task(task, seed, count, frames=8, image_size=32, n_points=8):
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng(seed)
    build = {
        "classify": lambda: _classify_clip(rng, frames, image_size),
        "box_track": lambda: _box_clip(rng, frames, image_size),
        "point_track": lambda: _point_clip(rng, frames, image_size, n_points),
        "depth": lambda: _depth_clip(rng, frames, image_size),
        "pose": lambda: _pose_clip(rng, frames, image_size),
    }[task]
    return [build() for _ in range(count)]


def reverse_clip(clip):
    """Time-reversed copy; direction labels swap with their opposite."""
    labels = dict(clip.labels)
    if "class" in labels:
        labels["class"] = int(REVERSED_CLASS[labels["class"]])
    return SyntheticClip(clip.frames[::-1].copy(), labels)


def stack_labels(clips, task):
    """Batch the labels of ``clips`` into arrays keyed by task."""
    if task == "classify":
        return {"class": np.array([c.labels["class"] for c in clips])}
    if task == "box_track":
        return {"boxes": np.stack([c.labels["boxes"] for c in clips])}
    if task == "point_track":
        return {"tracks": np.stack([c.labels["tracks"] for c in clips]),
                "visible": np.stack([c.labels["visible"] for c in clips])}
    if task == "depth":
        return {"depth": np.stack([c.labels["depth"] for c in clips])}
    return {"pose": np.stack([c.labels["pose"] for c in clips])}


@dataclass
class ClipFeatures:
    """Encoder outputs for a batch of clips: taps ``(4, B, T, N, D)``, cls, registers."""

    taps: np.ndarray
    cls: np.ndarray
    registers: np.ndarray
    labels: dict

    def __len__(self):
        return self.taps.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return ClipFeatures(self.taps[:, idx], self.cls[idx], self.registers[idx],
                            {k: v[idx] for k, v in self.labels.items()})


def precompute_features(encoder, clips, task, batch=16):
    """Run the frozen encoder once over every frame of ``clips``."""
    taps, cls, regs = [], [], []
    for start in range(0, len(clips), batch):
        frames = np.stack([c.frames for c in clips[start:start + batch]])
        stack = encoder.encode_multitap(frames)
        taps.append(np.stack(stack.per_depth))
        cls.append(stack.cls)
        regs.append(stack.registers)
    return ClipFeatures(np.concatenate(taps, axis=1), np.concatenate(cls), np.concatenate(regs),
                        stack_labels(clips, task))
