"""Feature providers and state-vector assembly.

State layout: ``[image, subject, object, rel1, rel2, attr1, attr2]``.

Feature file format (little-endian)::

    magic   4 bytes  b"VRLF"
    version u32      1
    dims    u32
    count   u32
    count records of:
        key_len u32, key utf-8 bytes, dims x float32
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .scene import ObjectInstance, Scene

FEATURE_MAGIC = b"VRLF"
FEATURE_VERSION = 1
EMPTY = None


@dataclass(frozen=True)
class FeatureConfig:
    d_image: int = 64
    d_instance: int = 64
    d_phrase: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("d_image", "d_instance", "d_phrase"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "FeatureConfig":
        return cls(4096, 4096, 2400, seed)

    @property
    def state_dim(self) -> int:
        return self.d_image + 2 * self.d_instance + 4 * self.d_phrase


def _hash_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@lru_cache(maxsize=65536)
def _phrase_vec(phrase: str, d_phrase: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(_hash_seed("phrase", seed, phrase)).standard_normal(d_phrase)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def phrase_embedding(phrase: str | None, d_phrase: int, seed: int = 0) -> np.ndarray:
    if d_phrase < 1:
        raise ValueError("d_phrase must be >= 1")
    if phrase is EMPTY or phrase == "":
        return np.zeros(d_phrase)
    return _phrase_vec(phrase, d_phrase, seed)


@dataclass(frozen=True)
class HistoryBuffer:
    rel_slots: tuple = (EMPTY, EMPTY)
    attr_slots: tuple = (EMPTY, EMPTY)


def update_history(hist: HistoryBuffer, phrase: str | None, kind: str) -> HistoryBuffer:
    if kind not in ("relationship", "attribute"):
        raise ValueError(f"unknown phrase kind {kind!r}")
    if phrase is None:
        return hist
    if kind == "relationship":
        return HistoryBuffer((phrase, hist.rel_slots[0]), hist.attr_slots)
    return HistoryBuffer(hist.rel_slots, (phrase, hist.attr_slots[0]))


def history_vector(hist: HistoryBuffer, cfg: FeatureConfig) -> np.ndarray:
    return np.concatenate([phrase_embedding(p, cfg.d_phrase, cfg.seed)
                           for p in (*hist.rel_slots, *hist.attr_slots)])


def _check(v: np.ndarray, d: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (d,):
        raise ValueError(f"{what} feature has shape {v.shape}, expected ({d},)")
    return v


def assemble_state(image_feat, subj_feat, obj_feat, hist: HistoryBuffer, cfg: FeatureConfig) -> np.ndarray:
    return np.concatenate([
        _check(image_feat, cfg.d_image, "image"),
        _check(subj_feat, cfg.d_instance, "subject"),
        _check(obj_feat, cfg.d_instance, "object"),
        history_vector(hist, cfg),
    ])


class ActionHistory:
    """Last four joint actions as concatenated multi-hot (|C|+|A|+|P|) vectors."""

    def __init__(self, n_categories: int, n_attributes: int, n_predicates: int, length: int = 4):
        self.sizes = (n_categories, n_attributes, n_predicates)
        self.width = sum(self.sizes)
        self.length = length
        self.slots: deque = deque(maxlen=length)

    def push(self, g_c: int | None, g_a: int | None, g_p: int | None) -> None:
        nc, na, _ = self.sizes
        v = np.zeros(self.width)
        if g_c is not None:
            v[g_c] = 1.0
        if g_a is not None:
            v[nc + g_a] = 1.0
        if g_p is not None:
            v[nc + na + g_p] = 1.0
        self.slots.appendleft(v)

    def vector(self) -> np.ndarray:
        out = np.zeros(self.width * self.length)
        for k, v in enumerate(self.slots):
            out[k * self.width:(k + 1) * self.width] = v
        return out


def assemble_action_state(image_feat, subj_feat, obj_feat, actions: ActionHistory, cfg: FeatureConfig) -> np.ndarray:
    return np.concatenate([
        _check(image_feat, cfg.d_image, "image"),
        _check(subj_feat, cfg.d_instance, "subject"),
        _check(obj_feat, cfg.d_instance, "object"),
        actions.vector(),
    ])


class SyntheticFeatureProvider:
    """Stand-in for detector and CNN features.

    An instance vector mixes fixed per-category directions by the detector's
    category scores and adds noise seeded from (scene id, instance id, box),
    so it does not depend on the order of the instance list. Categories in
    the same family (index modulo ``families``) get correlated directions,
    standing in for visually similar classes. The image vector
    is seeded noise plus the sum of its instances' category directions, so
    it tells which categories are present.
    """

    def __init__(self, cfg: FeatureConfig, n_categories: int, noise: float = 0.3, families: int = 5,
                 family_share: float = 0.5):
        if not 0.0 <= family_share <= 1.0:
            raise ValueError("family_share must be in [0, 1]")
        self.cfg = cfg
        self.noise = noise
        rng = np.random.default_rng(_hash_seed("category-basis", cfg.seed))
        self._cat_inst = self._basis(rng, n_categories, cfg.d_instance, families, family_share)
        self._cat_img = self._basis(rng, n_categories, cfg.d_image, families, family_share)
        self._cache: dict = {}

    @staticmethod
    def _basis(rng, n, d, families, share):
        """Category directions; members of a family (``c % families``) share a component."""
        own = rng.standard_normal((n, d))
        if families:
            fam = rng.standard_normal((families, d))
            own = np.sqrt(share) * fam[np.arange(n) % families] + np.sqrt(1.0 - share) * own
        return own / np.sqrt(d) * 2.0

    def instance_feature(self, scene: Scene, inst: ObjectInstance) -> np.ndarray:
        key = ("i", scene.id, inst.id, inst.box)
        v = self._cache.get(key)
        if v is None:
            rng = np.random.default_rng(_hash_seed("instance", self.cfg.seed, scene.id, inst.id, inst.box.as_list()))
            v = self.noise * rng.standard_normal(self.cfg.d_instance)
            for c, s in sorted(inst.category_scores.items()):
                v += s * self._cat_inst[c]
            v.setflags(write=False)
            self._cache[key] = v
        return v

    def image_feature(self, scene: Scene) -> np.ndarray:
        key = ("m", scene.id, scene.image_feature_key)
        v = self._cache.get(key)
        if v is None:
            rng = np.random.default_rng(_hash_seed("image", self.cfg.seed, scene.image_feature_key))
            v = self.noise * rng.standard_normal(self.cfg.d_image)
            if scene.instances:
                mix = np.zeros(self.cfg.d_image)
                for inst in sorted(scene.instances, key=lambda i: i.id):
                    for c, s in sorted(inst.category_scores.items()):
                        mix += s * self._cat_img[c]
                v += mix
            v.setflags(write=False)
            self._cache[key] = v
        return v


class FileFeatureProvider:
    """Precomputed features read from feature files.

    Image vectors are keyed by ``scene.image_feature_key`` and instance vectors
    by ``"<scene id>/<instance id>"``.
    """

    def __init__(self, image_path: str | Path, instance_path: str | Path, cfg: FeatureConfig | None = None):
        self.images = read_feature_file(image_path)
        self.instances = read_feature_file(instance_path)
        if cfg is not None:
            for name, table, d in (("image", self.images, cfg.d_image), ("instance", self.instances, cfg.d_instance)):
                if table and next(iter(table.values())).shape[0] != d:
                    raise ValueError(f"{name} feature file dims do not match config ({d})")
        self.cfg = cfg

    def image_feature(self, scene: Scene) -> np.ndarray:
        try:
            return self.images[scene.image_feature_key]
        except KeyError:
            raise KeyError(f"no image feature for key {scene.image_feature_key!r}") from None

    def instance_feature(self, scene: Scene, inst: ObjectInstance) -> np.ndarray:
        key = f"{scene.id}/{inst.id}"
        try:
            return self.instances[key]
        except KeyError:
            raise KeyError(f"no instance feature for key {key!r}") from None


def write_feature_file(path: str | Path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(items)
    dims = len(items[0][1]) if items else 0
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, dims, len(items)))
        for key, vec in items:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dims,):
                raise ValueError(f"feature {key!r} has shape {vec.shape}, expected ({dims},)")
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(vec.tobytes())
    tmp.replace(path)


def read_feature_file(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, dims, count = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        key = data[off:off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(data, dtype="<f4", count=dims, offset=off).astype(np.float64)
        vec.setflags(write=False)
        off += 4 * dims
        out[key] = vec
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return out
