"""On-disk synthetic datasets: raw beam-bin images, label masks, poses and a manifest.

Layout of a dataset directory::

    manifest.json        scene settings, geometry, seed and every file with role and sha256
    poses.csv            view, rx, ry, rz, tx, ty, tz, depth_d
    view_###.img         float32 little-endian intensities, beam-major (n_beams x n_bins)
    view_###.meta        key=value header of the view
    view_###.mask        uint8 component labels, same layout as the image
    truth.obj            ground-truth mesh, when known
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import SonarGeometry, SonarPose
from .mesh import TriangleMesh, load_obj, save_obj
from .multipath import InterfaceState

FORMAT = "sonar3d-dataset"
VERSION = 1
POSE_FIELDS = ["view", "rx", "ry", "rz", "tx", "ty", "tz", "depth_d"]


class DatasetError(ValueError):
    """Malformed, incomplete or tampered dataset directory."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_meta(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"{path}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class DatasetView:
    image: np.ndarray
    pose: SonarPose
    state: InterfaceState
    labels: np.ndarray | None = None
    name: str = ""


@dataclass
class Dataset:
    root: Path
    geometry: SonarGeometry
    views: list
    manifest: dict = field(default_factory=dict)

    @property
    def truth_path(self) -> Path | None:
        name = self.manifest.get("truth")
        return self.root / name if name else None

    def truth(self) -> TriangleMesh | None:
        p = self.truth_path
        return load_obj(p) if p is not None and p.exists() else None

    @property
    def images(self) -> list:
        return [v.image for v in self.views]

    @property
    def poses(self) -> list:
        return [v.pose for v in self.views]


def write_dataset(root, synth, g: SonarGeometry, scene: dict | None = None, seed: int | None = None,
                  truth: TriangleMesh | None = None, extra: dict | None = None) -> Path:
    """Write rendered views (``scene.SyntheticView``-like objects) to ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = []

    def record(path: Path, role: str):
        files.append({"path": path.name, "role": role, "sha256": sha256(path)})

    with open(root / "poses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(POSE_FIELDS)
        for k, s in enumerate(synth):
            p = s.pose
            w.writerow([k, *(repr(float(x)) for x in p.r), *(repr(float(x)) for x in p.t),
                        repr(p.depth_d)])
    for k, s in enumerate(synth):
        stem = f"view_{k:03d}"
        img = np.ascontiguousarray(s.image, dtype="<f4")
        if img.shape != g.shape:
            raise DatasetError(f"view {k}: image shape {img.shape} != {g.shape}")
        (root / f"{stem}.img").write_bytes(img.tobytes())
        (root / f"{stem}.mask").write_bytes(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
        st = s.state
        _write_meta(root / f"{stem}.meta", {
            "view": k, "n_beams": g.n_beams, "n_bins": g.n_bins, "dtype": "float32le",
            "order": "beam-major", "interface_height": repr(float(st.height)),
            "interface_normal": ",".join(repr(float(x)) for x in st.normal),
            "multipath": int(bool(st.enabled)), "reflectivity": repr(float(st.reflectivity)),
            "labels": "0 background,1 object,2 mirror,3 ghost,4 corrupted",
        })
        for suffix, role in ((".img", "image"), (".mask", "labels"), (".meta", "meta")):
            record(root / f"{stem}{suffix}", role)
    record(root / "poses.csv", "poses")
    manifest = {"format": FORMAT, "version": VERSION, "n_views": len(synth), "seed": seed,
                "geometry": g.to_dict(), "scene": scene or {}, "truth": None}
    if truth is not None:
        save_obj(truth, root / "truth.obj")
        record(root / "truth.obj", "truth")
        manifest["truth"] = "truth.obj"
    if extra:
        manifest.update(extra)
    manifest["files"] = files
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root, verify: bool = True) -> Dataset:
    """Read a dataset directory; ``verify`` checks every listed checksum."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{mpath}: not a {FORMAT} manifest")
    if verify:
        for entry in manifest.get("files", []):
            p = root / entry["path"]
            if not p.exists():
                raise DatasetError(f"missing file {entry['path']}")
            if sha256(p) != entry["sha256"]:
                raise DatasetError(f"checksum mismatch for {entry['path']}")
    g = SonarGeometry.from_dict(manifest["geometry"])
    with open(root / "poses.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != manifest["n_views"]:
        raise DatasetError(f"poses.csv has {len(rows)} rows, manifest says {manifest['n_views']}")
    views = []
    for k, row in enumerate(rows):
        stem = f"view_{k:03d}"
        raw = np.fromfile(root / f"{stem}.img", dtype="<f4")
        if raw.size != g.n_beams * g.n_bins:
            raise DatasetError(f"{stem}.img has {raw.size} values, expected {g.n_beams * g.n_bins}")
        img = raw.reshape(g.shape).astype(float)
        labels = None
        mask_path = root / f"{stem}.mask"
        if mask_path.exists():
            labels = np.fromfile(mask_path, dtype=np.uint8).reshape(g.shape)
        meta = read_meta(root / f"{stem}.meta")
        normal = np.array([float(x) for x in meta.get("interface_normal", "0,0,1").split(",")])
        state = InterfaceState(float(meta.get("interface_height", 0.0)), normal,
                               bool(int(meta.get("multipath", 1))),
                               float(meta.get("reflectivity", 0.9)))
        pose = SonarPose(r=[float(row[c]) for c in ("rx", "ry", "rz")],
                         t=[float(row[c]) for c in ("tx", "ty", "tz")],
                         depth_d=float(row["depth_d"]))
        views.append(DatasetView(img, pose, state, labels, stem))
    return Dataset(root, g, views, manifest)
