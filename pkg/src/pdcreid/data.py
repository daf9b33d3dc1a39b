"""In-memory datasets and the on-disk layout.

Layout::

    <root>/manifest.txt                       generator spec as key = value lines
    <root>/<identity>/<index>.ppm             8-bit RGB image
    <root>/<identity>/<index>.joints.csv      joint,x,y (14 rows)
    <root>/<identity>/<index>.heat.pdct       optional [14, H, W] response maps

Identities and indices are zero-padded decimal numbers. The camera of an
image is ``index % cameras`` (``cameras`` from the manifest, default 1).
When a heatmap file exists, joints are localized from it; otherwise the CSV
joints are used as given.
"""
import os
from dataclasses import dataclass

import numpy as np

from . import fen
from .errors import ShapeError
from .tensorio import read_pdct, write_pdct

MANIFEST = "manifest.txt"


@dataclass
class ReidDataset:
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray
    cameras: np.ndarray
    indices: np.ndarray
    joints: np.ndarray  # [N, 14, 2]

    def __len__(self):
        return len(self.labels)

    @property
    def image_hw(self):
        return tuple(self.images.shape[2:])

    def subset(self, positions):
        p = np.asarray(positions, dtype=np.int64)
        return ReidDataset(self.images[p], self.labels[p], self.cameras[p], self.indices[p], self.joints[p])


def from_samples(samples, localize=True):
    """Stack synthetic samples; joints come from their response maps unless ``localize`` is off."""
    joints = [fen.localize_joints(s.response_maps) if localize else s.joints for s in samples]
    return ReidDataset(
        images=np.stack([s.image for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        cameras=np.array([s.camera for s in samples], dtype=np.int64),
        indices=np.array([s.index for s in samples], dtype=np.int64),
        joints=np.stack(joints),
    )


def write_ppm(path, image):
    """Write ``image[3, H, W]`` in [0, 1] as binary PPM."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    if c != 3:
        raise ShapeError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ShapeError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def _read_manifest(root):
    meta = {}
    path = os.path.join(root, MANIFEST)
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    k, _, v = line.partition("=")
                    meta[k.strip()] = v.strip()
    return meta


def write_dataset(root, samples, spec=None, heatmaps=False):
    os.makedirs(root, exist_ok=True)
    if spec is not None:
        with open(os.path.join(root, MANIFEST), "w") as fh:
            fh.write(spec.to_text())
    for s in samples:
        d = os.path.join(root, f"{s.label:04d}")
        os.makedirs(d, exist_ok=True)
        stem = os.path.join(d, f"{s.index:03d}")
        write_ppm(stem + ".ppm", s.image)
        fen.write_joints_csv(stem + ".joints.csv", s.joints, index_column="joint")
        if heatmaps:
            write_pdct(stem + ".heat.pdct", s.response_maps)


def load_dataset(root):
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    meta = _read_manifest(root)
    cameras = int(meta.get("cameras", 1))
    images, labels, cams, indices, joints = [], [], [], [], []
    for ident in sorted((d for d in os.listdir(root) if d.isdigit()), key=int):
        d = os.path.join(root, ident)
        stems = sorted({f.split(".")[0] for f in os.listdir(d) if f.endswith(".ppm")}, key=int)
        for stem in stems:
            base = os.path.join(d, stem)
            img = read_ppm(base + ".ppm")
            if os.path.exists(base + ".heat.pdct"):
                j = fen.localize_joints(read_pdct(base + ".heat.pdct"))
            else:
                j = fen.read_joints_csv(base + ".joints.csv")
            images.append(img)
            labels.append(int(ident))
            indices.append(int(stem))
            cams.append(int(stem) % cameras)
            joints.append(j)
    if not images:
        raise FileNotFoundError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"images in {root} have mixed extents {sorted(shapes)}")
    return ReidDataset(np.stack(images), np.array(labels), np.array(cams), np.array(indices), np.stack(joints))


def part_batches(dataset, rotate, layout=None):
    """Normalized parts for every image: six arrays ``[N, 3, h, w]``."""
    per_image = [fen.extract_parts(img, j, rotate=rotate, layout=layout)[0]
                 for img, j in zip(dataset.images, dataset.joints)]
    return [np.stack([p[i] for p in per_image]) for i in range(fen.NUM_PARTS)]
