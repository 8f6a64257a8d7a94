"""Dataset manifests, video frame sampling and batch preprocessing.

The corpus index is a UTF-8 CSV with header `path,dataset,label,split,fold`.
Batch preprocessing pushes every record through the cleaning pipeline and
a resize, writes PNGs, and logs per-file outcomes; individual failures are
recorded rather than fatal since large multi-source corpora inevitably
contain unreadable files.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import annomask, imgproc

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["path", "dataset", "label", "split", "fold"]


class ManifestError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class MissingColumn(ManifestError):
    pass


class DuplicatePath(ManifestError):
    pass


class BadSplitValue(ManifestError):
    pass


class BadFoldValue(ManifestError):
    pass


class EmptyVideo(ValueError):
    pass


class OutputDirUnwritable(OSError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    path: str
    dataset: str
    label: str | None = None
    split: str = "train"
    fold: int | None = None


@dataclass
class Manifest:
    records: list[SampleRecord]
    source_uri: str = ""

    def __len__(self):
        return len(self.records)

    def subset(self, split: str | None = None, fold: int | None = None) -> list[SampleRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if fold is not None:
            out = [r for r in out if r.fold == fold]
        return out


@dataclass(frozen=True)
class FrameSamplingPolicy:
    frames_per_second: float = 3.0

    def __post_init__(self):
        if self.frames_per_second <= 0:
            raise ValueError("frames_per_second must be > 0")


def load_manifest(source: str | Path) -> Manifest:
    source = Path(source)
    with open(source, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"empty manifest {source}") from None
        if [c.strip() for c in header] != MANIFEST_HEADER:
            missing = [c for c in MANIFEST_HEADER if c not in header]
            raise MissingColumn(
                f"manifest header must be exactly {','.join(MANIFEST_HEADER)}; missing {missing or header}"
            )
        records: list[SampleRecord] = []
        seen: dict[str, int] = {}
        for i, row in enumerate(reader, start=2):  # 1-based, counting the header
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise MissingColumn(f"expected {len(MANIFEST_HEADER)} cells, got {len(row)}", row=i)
            path, dataset, label, split, fold = (c.strip() for c in row)
            if not path:
                raise ManifestError("empty path", row=i)
            if path in seen:
                raise DuplicatePath(f"path {path!r} already appears at row {seen[path]}", row=i)
            seen[path] = i
            if split not in SPLITS:
                raise BadSplitValue(f"split must be one of {SPLITS}, got {split!r}", row=i)
            if fold:
                try:
                    fold_val = int(fold)
                except ValueError:
                    raise BadFoldValue(f"fold must be an integer, got {fold!r}", row=i) from None
                if fold_val < 0:
                    raise BadFoldValue(f"fold must be >= 0, got {fold_val}", row=i)
            else:
                fold_val = None
            records.append(
                SampleRecord(path=path, dataset=dataset, label=label or None, split=split, fold=fold_val)
            )
    if not records:
        raise ManifestError(f"manifest {source} has no records")
    return Manifest(records=records, source_uri=str(source))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow(
                [r.path, r.dataset, r.label or "", r.split, "" if r.fold is None else r.fold]
            )


# ---------------------------------------------------------------------------
# video frame sampling


def sample_frame_indices(frame_count: int, native_fps: float, policy: FrameSamplingPolicy) -> list[int]:
    """Nearest-preceding frame indices at the policy rate: floor(k * native
    / target) for k = 0, 1, ... below frame_count, deduplicated (no
    upsampling) and strictly increasing."""
    if frame_count <= 0:
        raise EmptyVideo("no frames")
    if native_fps <= 0:
        raise ValueError("native fps must be > 0")
    step = native_fps / policy.frames_per_second
    out: list[int] = []
    k = 0
    while True:
        idx = math.floor(k * step)
        if idx >= frame_count:
            break
        if not out or idx > out[-1]:
            out.append(idx)
        k += 1
    return out


def sample_video_frames(frames, native_fps: float, policy: FrameSamplingPolicy) -> list[np.ndarray]:
    """Extract frames at the policy rate; each becomes an independent 2D image."""
    frames = list(frames)
    indices = sample_frame_indices(len(frames), native_fps, policy)
    return [np.asarray(frames[i]) for i in indices]


# ---------------------------------------------------------------------------
# batch preprocessing


@dataclass
class BatchReport:
    processed: int = 0
    failed: int = 0
    entries: list[dict] = field(default_factory=list)  # sorted by path

    def to_json(self) -> str:
        return json.dumps(
            {"processed": self.processed, "failed": self.failed, "files": self.entries}, indent=2
        )


@dataclass(frozen=True)
class PreprocessConfig:
    clean: annomask.CleanConfig = field(default_factory=annomask.CleanConfig)
    target_size: int = 224
    debug_masks: bool = False


def _preprocess_one(record: SampleRecord, cfg: PreprocessConfig, out_dir: Path) -> dict:
    img = imgproc.read_png(record.path)
    cleaned, bundle = annomask.clean_image(img, cfg.clean)
    resized = imgproc.resize_bilinear(cleaned, cfg.target_size, cfg.target_size)
    stem = Path(record.path).stem
    out_name = f"{record.dataset}__{stem}.png"
    imgproc.write_png(out_dir / out_name, resized)
    if cfg.debug_masks:
        for name, mask in (
            ("text", bundle.text_mask),
            ("color", bundle.color_mask),
            ("gray", bundle.gray_mask),
            ("fused", bundle.fused),
        ):
            imgproc.write_png(out_dir / f"{record.dataset}__{stem}.mask_{name}.png", mask.astype(float))
    return {
        "path": record.path,
        "status": "ok",
        "output": out_name,
        "masked_pixels": int(bundle.fused.sum()),
    }


def run_preprocess_batch(
    manifest: Manifest,
    config: PreprocessConfig,
    out_dir: str | Path,
    workers: int = 1,
) -> BatchReport:
    """Clean + resize every record to `<dataset>__<stem>.png` under out_dir.

    Per-file failures are captured in the report, never fatal. The log is
    sorted by path so output is deterministic regardless of scheduling, and
    the JSON report lands at out_dir/report.json.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OutputDirUnwritable(f"cannot write to {out_dir}: {exc}") from exc

    def worker(record: SampleRecord) -> dict:
        try:
            return _preprocess_one(record, config, out_dir)
        except Exception as exc:  # noqa: BLE001 - per-file capture is the contract
            return {"path": record.path, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(worker, manifest.records))
    else:
        entries = [worker(r) for r in manifest.records]
    entries.sort(key=lambda e: e["path"])
    report = BatchReport(
        processed=sum(1 for e in entries if e["status"] == "ok"),
        failed=sum(1 for e in entries if e["status"] != "ok"),
        entries=entries,
    )
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report
