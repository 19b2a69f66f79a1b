"""Regenerate the sample files under data/.

    python scripts/make_demo_data.py
"""

from pathlib import Path

import numpy as np

from tpsmotion import io
from tpsmotion.estimation import grid_init
from tpsmotion.geometry import AffineTransform, random_nondegenerate_points

K, N = 10, 5
DATA = Path(__file__).resolve().parent.parent / "data"


def bend(points, amount):
    """Bend along x with a quadratic profile in y, plus a slight sway."""
    out = points.copy()
    out[..., 0] += amount * (out[..., 1] ** 2 - 0.25)
    out[..., 1] += 0.5 * amount * np.sin(np.pi * out[..., 0])
    return out


def main():
    DATA.mkdir(exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(2022))

    driving = np.stack([random_nondegenerate_points(rng, N, -0.9, 0.9, 0.1) for _ in range(K)])
    sample = io.KeypointDocument(
        K, N, [io.KeypointFrame(bend(driving, 0.15), driving, AffineTransform.translation(0.01, -0.02))]
    )
    io.write_keypoints(sample, DATA / "sample_keypoints.json")

    base, _ = grid_init(K, N, radius=0.2)
    io.write_keypoints(io.KeypointDocument(K, N, [io.KeypointFrame(base, base)]), DATA / "identity_keypoints.json")

    frames = [io.KeypointFrame(base, bend(base, a)) for a in np.linspace(0.0, 0.2, 8)]
    io.write_keypoints(io.KeypointDocument(K, N, frames), DATA / "demo_sequence.json")

    y, x = np.mgrid[0:256, 0:256] / 255.0
    img = np.stack(
        [
            127.5 + 127.5 * np.sin(2 * np.pi * 3 * x) * np.cos(2 * np.pi * 2 * y),
            255.0 * x,
            255.0 * (((np.floor(x * 8) + np.floor(y * 8)) % 2) * 0.6 + 0.2),
        ]
    )
    io.write_image(img, DATA / "test_pattern.png")


if __name__ == "__main__":
    main()
