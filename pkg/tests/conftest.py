import numpy as np
import pytest

from tilscore.foreground import RasterSlide


def noisy_disc_slide(n=2048, radius=800.0, seed=0, mpp=0.5):
    """Mid-grey slide with one high-texture noise disc, plus the ground-truth
    disc membership of each mask cell (the generator knows where it painted)."""
    rng = np.random.default_rng(seed)
    base = np.full((n, n, 3), 128, dtype=np.uint8)
    yy, xx = np.mgrid[0:n, 0:n]
    disc = (xx - n / 2.0) ** 2 + (yy - n / 2.0) ** 2 <= radius**2
    noise = rng.integers(0, 256, size=(n, n, 3)).astype(np.uint8)
    slide = RasterSlide(slide_id="disc", pixels=np.where(disc[..., None], noise, base), mpp=mpp)

    def truth_at_scale(factor: int) -> np.ndarray:
        mh = int(np.ceil(n / factor))
        mw = int(np.ceil(n / factor))
        cy, cx = np.mgrid[0:mh, 0:mw]
        return ((cx + 0.5) * factor - n / 2.0) ** 2 + ((cy + 0.5) * factor - n / 2.0) ** 2 <= radius**2

    return slide, truth_at_scale


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


@pytest.fixture
def disc_slide():
    return noisy_disc_slide()
