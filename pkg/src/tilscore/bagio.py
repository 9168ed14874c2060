"""Feature-bag and clinical-table I/O, plus a synthetic cohort generator.

A "bag" is one slide's worth of per-tile feature vectors with their tile
coordinates.  Bags are stored in a fixed little-endian binary layout
(magic "ECTB") so files are byte-identical across platforms; features are
f32 on disk while model arithmetic runs in f64.

The synthetic generator plants a latent per-tile density d in [0, 1],
embeds (d, noise) through a fixed random linear map, and labels the slide
with exactly mean(d) * 100.  That makes slide labels recoverable from
features by construction, which is what the training-recovery tests lean on.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BAG_MAGIC = b"ECTB"
BAG_VERSION = 1


class BagFormatError(ValueError):
    """Malformed bag stream."""


class BadMagicError(BagFormatError):
    pass


class TruncatedStreamError(BagFormatError):
    pass


class DimMismatchError(BagFormatError):
    pass


class ClinicalSchemaError(ValueError):
    """Clinical table violates the expected schema."""


@dataclass
class FeatureBag:
    """One slide: tile coordinates plus an n_tiles x dim feature matrix."""

    slide_id: str
    features: np.ndarray  # (n_tiles, dim) float32
    tile_xy: np.ndarray  # (n_tiles, 2) source-pixel top-left coords
    mpp: float
    tile_size_px: int = 512

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        xy = np.asarray(self.tile_xy)
        if xy.size and (np.any(xy < 0) or np.any(xy > 0xFFFFFFFF)):
            raise ValueError("tile coordinates must fit in unsigned 32-bit")
        self.tile_xy = np.ascontiguousarray(xy, dtype=np.uint32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-d matrix")
        if self.tile_xy.shape != (self.features.shape[0], 2):
            raise ValueError("tile_xy must be (n_tiles, 2)")
        if not np.isfinite(self.features).all():
            raise ValueError(f"bag {self.slide_id!r} contains non-finite features")
        if not self.mpp > 0:
            raise ValueError("mpp must be positive")

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_bag(bag: FeatureBag, sink) -> None:
    """Serialize a bag; byte-deterministic for equal inputs."""
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            write_bag(bag, fh)
        return
    sid = bag.slide_id.encode("utf-8")
    sink.write(BAG_MAGIC)
    sink.write(struct.pack("<HH", BAG_VERSION, len(sid)))
    sink.write(sid)
    sink.write(struct.pack("<IIIf", bag.n_tiles, bag.dim, bag.tile_size_px, bag.mpp))
    sink.write(bag.tile_xy.astype("<u4").tobytes())
    sink.write(bag.features.astype("<f4").tobytes())


def _read_exact(stream, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedStreamError(f"stream ended inside {what} (wanted {n} bytes, got {len(data)})")
    return data


def read_bag(source, expect_dim: int | None = None) -> FeatureBag:
    """Parse a bag; with `expect_dim`, a differing feature width is an error."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
        stream = io.BytesIO(data)
        bag = read_bag(stream, expect_dim)
        if stream.read(1):
            raise BagFormatError(f"trailing bytes after bag in {source}")
        return bag
    magic = _read_exact(source, 4, "magic")
    if magic != BAG_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    version, id_len = struct.unpack("<HH", _read_exact(source, 4, "header"))
    if version != BAG_VERSION:
        raise BagFormatError(f"unsupported bag version {version}")
    slide_id = _read_exact(source, id_len, "slide id").decode("utf-8")
    n_tiles, dim, tile_size, mpp = struct.unpack("<IIIf", _read_exact(source, 16, "shape header"))
    if n_tiles < 1 or dim < 1:
        raise BagFormatError(f"invalid bag shape {n_tiles}x{dim}")
    if expect_dim is not None and dim != expect_dim:
        raise DimMismatchError(f"bag {slide_id!r} has dim {dim}, expected {expect_dim}")
    xy = np.frombuffer(_read_exact(source, 8 * n_tiles, "tile coords"), dtype="<u4")
    feats = np.frombuffer(_read_exact(source, 4 * n_tiles * dim, "features"), dtype="<f4")
    return FeatureBag(
        slide_id=slide_id,
        features=feats.reshape(n_tiles, dim).copy(),
        tile_xy=xy.reshape(n_tiles, 2).copy(),
        mpp=float(mpp),
        tile_size_px=int(tile_size),
    )


# ---------------------------------------------------------------------------
# Clinical records
# ---------------------------------------------------------------------------

MANDATORY_COLUMNS = ("slide_id", "til_score_pct")
RESERVED_COLUMNS = MANDATORY_COLUMNS + ("cohort", "centre", "til_score_pct_2", "os_months", "os_event")


@dataclass
class SlideRecord:
    slide_id: str
    cohort: str = ""
    centre: str = ""
    til_score_pct: float = 0.0
    covariates: dict = field(default_factory=dict)
    os_months: float | None = None
    os_event: int | None = None


def _parse_covariate(raw: str):
    try:
        return float(raw)
    except ValueError:
        return raw


def load_clinical(source) -> list[SlideRecord]:
    """Read the clinical CSV schema into typed records.

    When two pathologist score columns are present, the record stores their
    mean.  Unknown columns become covariates (numeric when parseable,
    verbatim strings otherwise); empty cells are missing values.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return load_clinical(fh)
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    for col in MANDATORY_COLUMNS:
        if col not in header:
            raise ClinicalSchemaError(f"missing mandatory column {col!r}")
    has_second = "til_score_pct_2" in header
    records = []
    for lineno, row in enumerate(reader, start=2):
        sid = (row.get("slide_id") or "").strip()
        if not sid:
            raise ClinicalSchemaError(f"line {lineno}: empty slide_id")
        raw_score = (row.get("til_score_pct") or "").strip()
        if not raw_score:
            raise ClinicalSchemaError(f"line {lineno}: missing til_score_pct")
        score = float(raw_score)
        if has_second and (row.get("til_score_pct_2") or "").strip():
            score = (score + float(row["til_score_pct_2"])) / 2.0
        if not 0.0 <= score <= 100.0:
            raise ClinicalSchemaError(f"line {lineno}: til_score_pct {score} outside [0, 100]")
        raw_months = (row.get("os_months") or "").strip()
        raw_event = (row.get("os_event") or "").strip()
        if bool(raw_months) != bool(raw_event):
            raise ClinicalSchemaError(f"line {lineno}: os_months and os_event must both be present or both absent")
        os_months = float(raw_months) if raw_months else None
        os_event = int(raw_event) if raw_event else None
        if os_event not in (None, 0, 1):
            raise ClinicalSchemaError(f"line {lineno}: os_event must be 0 or 1")
        covariates = {}
        for key, val in row.items():
            if key in RESERVED_COLUMNS or key is None:
                continue
            val = (val or "").strip()
            if val:
                covariates[key] = _parse_covariate(val)
        records.append(SlideRecord(
            slide_id=sid,
            cohort=(row.get("cohort") or "").strip(),
            centre=(row.get("centre") or "").strip(),
            til_score_pct=score,
            covariates=covariates,
            os_months=os_months,
            os_event=os_event,
        ))
    return records


def write_clinical(records: list[SlideRecord], path) -> None:
    cov_cols = sorted({k for r in records for k in r.covariates})
    has_surv = any(r.os_months is not None for r in records)
    header = ["slide_id", "cohort", "centre", "til_score_pct"]
    if has_surv:
        header += ["os_months", "os_event"]
    header += cov_cols
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [r.slide_id, r.cohort, r.centre, repr(float(r.til_score_pct))]
            if has_surv:
                row += ["" if r.os_months is None else repr(float(r.os_months)),
                        "" if r.os_event is None else str(r.os_event)]
            row += [str(r.covariates.get(c, "")) for c in cov_cols]
            w.writerow(row)


def write_predictions(pairs: list[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "ectil_score"])
        for sid, score in pairs:
            w.writerow([sid, repr(float(score))])


def read_predictions(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"slide_id", "ectil_score"} <= set(reader.fieldnames):
            raise ClinicalSchemaError("predictions CSV needs slide_id and ectil_score columns")
        out = {}
        for row in reader:
            score = float(row["ectil_score"])
            if not 0.0 <= score <= 1.0:
                raise ClinicalSchemaError(f"prediction {score} outside [0, 1] for {row['slide_id']!r}")
            out[row["slide_id"]] = score
    return out


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Seeded cohort recipe; output is a pure function of this config."""

    n_slides: int = 50
    tiles_min: int = 20
    tiles_max: int = 60
    dim: int = 2048
    seed: int = 0
    noise_dim: int = 8
    noise_sigma: float = 0.3
    slide_mean_lo: float = 0.05
    slide_mean_hi: float = 0.95
    density_concentration: float = 8.0
    n_centres: int = 5
    n_cohorts: int = 5
    tile_size_px: int = 512
    mpp: float = 0.5
    survival: bool = False
    surv_base_hazard: float = 0.02
    surv_beta_per_unit: float = -0.15  # per 10 TIL percentage points
    surv_censor_lo: float = 24.0
    surv_censor_hi: float = 120.0

    def validate(self) -> None:
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")
        if not 1 <= self.tiles_min <= self.tiles_max:
            raise ValueError("invalid tiles_per_slide range")
        if self.dim < 1 or self.noise_dim < 0:
            raise ValueError("invalid dimensions")
        if not 0.0 <= self.slide_mean_lo <= self.slide_mean_hi <= 1.0:
            raise ValueError("slide mean range must be inside [0, 1]")


def synth_cohort(cfg: SynthConfig) -> tuple[list[FeatureBag], list[SlideRecord]]:
    """Generate bags plus matching clinical records.

    Each tile carries a latent density d ~ Beta centred on its slide's mean;
    the slide label is exactly mean(d) * 100 and features are the linear
    embedding of (d, noise), so a linear readout of the features recovers
    the label up to noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    embed = rng.normal(size=(1 + cfg.noise_dim, cfg.dim)) / np.sqrt(1 + cfg.noise_dim)
    bags, records = [], []
    for i in range(cfg.n_slides):
        n_tiles = int(rng.integers(cfg.tiles_min, cfg.tiles_max + 1))
        mu = float(rng.uniform(cfg.slide_mean_lo, cfg.slide_mean_hi))
        c = cfg.density_concentration
        if mu in (0.0, 1.0):
            density = np.full(n_tiles, mu)  # beta degenerates at the endpoints
        else:
            density = rng.beta(c * mu, c * (1.0 - mu), size=n_tiles)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(n_tiles, cfg.noise_dim))
        latent = np.column_stack([density, noise])
        features = (latent @ embed).astype(np.float32)
        ncols = int(np.ceil(np.sqrt(n_tiles)))
        ks = np.arange(n_tiles)
        xy = np.column_stack([(ks % ncols) * cfg.tile_size_px, (ks // ncols) * cfg.tile_size_px])
        sid = f"synth{i:04d}"
        bags.append(FeatureBag(slide_id=sid, features=features, tile_xy=xy,
                               mpp=cfg.mpp, tile_size_px=cfg.tile_size_px))
        label = float(density.mean()) * 100.0
        rec = SlideRecord(
            slide_id=sid,
            cohort=f"cohort{i % cfg.n_cohorts}",
            centre=f"centre{i % cfg.n_centres}",
            til_score_pct=label,
        )
        if cfg.survival:
            hazard = cfg.surv_base_hazard * np.exp(cfg.surv_beta_per_unit * (label / 10.0))
            t_event = float(rng.exponential(1.0 / hazard))
            t_cens = float(rng.uniform(cfg.surv_censor_lo, cfg.surv_censor_hi))
            rec.os_event = int(t_event <= t_cens)
            rec.os_months = max(round(min(t_event, t_cens), 4), 0.001)
        records.append(rec)
    return bags, records
