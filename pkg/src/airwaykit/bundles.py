"""Dataset bundle I/O.

A bundle is a directory with three files: ``manifest.txt`` (UTF-8
``key = value`` lines), ``patches.bin`` (little-endian float32, row-major,
one record per item) and ``labels.csv``. Volume bundles reuse the raw layout
with an extra ``depth`` manifest key and may omit the labels file.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .labels import LABEL_FIELDS, AirwayLabel
from .util import format_float

MANIFEST_NAME = "manifest.txt"
PATCHES_NAME = "patches.bin"
LABELS_NAME = "labels.csv"

DTYPE_TAG = "float32-le"
ORDER_TAG = "row-major"

LABELS_HEADER = ("id",) + LABEL_FIELDS + ("has_adjacent",)


def write_manifest(path: Path | str, entries: dict) -> None:
    lines = "".join(f"{k} = {v}\n" for k, v in entries.items())
    Path(path).write_text(lines, encoding="utf-8")


def read_manifest(path: Path | str) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        entries[key.strip()] = value.strip()
    return entries


def write_labels_csv(path: Path | str, ids, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for item_id, label in zip(ids, labels):
            writer.writerow(_label_row(item_id, label))


def read_labels_csv(path: Path | str) -> tuple[list[str], list[AirwayLabel]]:
    """Returns (ids, labels) in file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"labels file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty labels file") from None
        if tuple(header) != LABELS_HEADER:
            raise DataError(f"{path}: bad header {header!r}, expected {list(LABELS_HEADER)}")
        ids: list[str] = []
        labels: list[AirwayLabel] = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(LABELS_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(LABELS_HEADER)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[1:8]]
                adjacent = bool(int(row[8]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0])
            labels.append(AirwayLabel(*values, has_adjacent=adjacent))
    return ids, labels


def _label_row(item_id, label: AirwayLabel) -> list:
    return ([str(item_id)]
            + [format_float(getattr(label, f)) for f in LABEL_FIELDS]
            + [str(int(label.has_adjacent))])


class BundleWriter:
    """Streams items to a bundle directory; one `add` per item, then `close`.

    Pass `depth` to write a volume bundle (items shaped depth x height x width).
    """

    def __init__(self, out_dir: Path | str, *, height: int, width: int,
                 pixel_spacing_mm: float, depth: int | None = None):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.height = int(height)
        self.width = int(width)
        self.depth = None if depth is None else int(depth)
        self.pixel_spacing_mm = float(pixel_spacing_mm)
        self._item_shape = ((self.height, self.width) if self.depth is None
                            else (self.depth, self.height, self.width))
        self._bin = open(self.dir / PATCHES_NAME, "wb")
        self._labels_fh = open(self.dir / LABELS_NAME, "w", encoding="utf-8", newline="")
        self._csv = csv.writer(self._labels_fh)
        self._csv.writerow(LABELS_HEADER)
        self._count = 0
        self._manifest: dict | None = None

    def add(self, pixels: np.ndarray, label: AirwayLabel | None = None) -> None:
        arr = np.asarray(pixels)
        if arr.shape != self._item_shape:
            raise DataError(f"item {self._count}: shape {arr.shape} does not match {self._item_shape}")
        self._bin.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if label is not None:
            self._csv.writerow(_label_row(self._count, label))
        self._count += 1

    def close(self) -> dict:
        """Finalize files and write the manifest; returns the manifest entries."""
        if self._manifest is not None:
            return self._manifest
        self._release()
        entries: dict = {"count": self._count}
        if self.depth is not None:
            entries["depth"] = self.depth
        entries.update(height=self.height, width=self.width,
                       pixel_spacing_mm=format_float(self.pixel_spacing_mm),
                       dtype=DTYPE_TAG, order=ORDER_TAG)
        write_manifest(self.dir / MANIFEST_NAME, entries)
        self._manifest = entries
        return entries

    def abort(self) -> None:
        """Close file handles without writing a manifest (bundle stays invalid)."""
        self._release()

    def _release(self) -> None:
        if not self._bin.closed:
            self._bin.close()
        if not self._labels_fh.closed:
            self._labels_fh.close()

    def __enter__(self) -> "BundleWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abort()


@dataclass
class DatasetBundle:
    """Read view of a bundle; `patches` is a read-only memmap."""
    path: Path
    manifest: dict[str, str]
    patches: np.ndarray
    ids: list[str] | None
    labels: list[AirwayLabel] | None

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def pixel_spacing_mm(self) -> float:
        return float(self.manifest["pixel_spacing_mm"])


def open_bundle(path: Path | str, *, need_labels: bool = False) -> DatasetBundle:
    path = Path(path)
    manifest = read_manifest(path / MANIFEST_NAME)
    for key in ("count", "height", "width", "pixel_spacing_mm", "dtype", "order"):
        if key not in manifest:
            raise DataError(f"{path}: manifest missing key {key!r}")
    if manifest["dtype"] != DTYPE_TAG:
        raise DataError(f"{path}: unsupported dtype {manifest['dtype']!r}")
    if manifest["order"] != ORDER_TAG:
        raise DataError(f"{path}: unsupported order {manifest['order']!r}")
    try:
        shape = [int(manifest["count"])]
        if "depth" in manifest:
            shape.append(int(manifest["depth"]))
        shape += [int(manifest["height"]), int(manifest["width"])]
        float(manifest["pixel_spacing_mm"])
    except ValueError as exc:
        raise DataError(f"{path}: bad manifest value: {exc}") from None

    bin_path = path / PATCHES_NAME
    if not bin_path.is_file():
        raise DataError(f"patch data not found: {bin_path}")
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    actual = bin_path.stat().st_size
    if actual != expected:
        raise DataError(f"{bin_path}: size {actual} bytes, manifest implies {expected}")
    if expected == 0:
        patches = np.empty(shape, dtype=np.float32)
    else:
        patches = np.memmap(bin_path, dtype="<f4", mode="r", shape=tuple(shape))

    ids = labels = None
    labels_path = path / LABELS_NAME
    if labels_path.is_file():
        ids, labels = read_labels_csv(labels_path)
        if labels and len(labels) != shape[0]:
            raise DataError(f"{labels_path}: {len(labels)} rows for {shape[0]} patches")
        if not labels:
            ids = labels = None
    if need_labels and labels is None:
        raise DataError(f"{path}: bundle has no labels")
    return DatasetBundle(path=path, manifest=manifest, patches=patches, ids=ids, labels=labels)
