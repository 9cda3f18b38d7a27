"""Two-tower encoders: a trainable linear student, frozen ridge-fitted
teachers, and a caption generator built on a teacher backbone.

All encoders share one shape: average-pool the image to an 8x8 grid (or take
the caption vector as-is), apply a linear map, and l2-normalize.  Teachers
are fitted once by ridge regression onto seeded per-class target directions
and frozen; diversity across teachers comes from their target banks.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np

from . import container, rng
from .kernels import l2_normalize_rows
from .validation import as_float_matrix, check_finite
from .world import World, sample_arrays, zero_shot_prompts

POOL_GRID = 8
MODEL_MAGIC = b"DRMD"
MODEL_EXTENSION = ".model"

DEFAULT_FIT_SAMPLES = 2048
DEFAULT_EVAL_SAMPLES = 512

# Real embedding models are anisotropic: everything they emit lives inside a
# narrow cone, so any two embeddings have positive cosine.  Teacher target
# banks reproduce that by mixing a shared per-teacher cone direction into the
# per-class directions; class structure rides on top of the cone.  Without
# this, embeddings of heavily cropped views point in near-arbitrary
# directions and stored teacher embeddings would not survive augmentation.
TARGET_CONE_STRENGTH = 1.0


def avgpool(images, image_side: int, grid: int = POOL_GRID) -> np.ndarray:
    """Average-pool flat square images to a grid x grid feature vector.

    Bin b covers pixel rows [floor(b*S/grid), floor((b+1)*S/grid)); a
    constant image pools to a constant vector for any side/grid combination.
    """
    arr = as_float_matrix(images, "images")
    side = int(image_side)
    if side < grid:
        raise ValueError(f"image_side {side} smaller than pool grid {grid}")
    if arr.shape[1] != side * side:
        raise ValueError(f"images have {arr.shape[1]} pixels, expected {side * side}")
    edges = np.floor(np.linspace(0.0, side, grid + 1)).astype(np.int64)
    grids = arr.reshape(arr.shape[0], side, side)
    out = np.empty((arr.shape[0], grid * grid), dtype=np.float64)
    for by in range(grid):
        rows = grids[:, edges[by] : edges[by + 1], :]
        for bx in range(grid):
            block = rows[:, :, edges[bx] : edges[bx + 1]]
            out[:, by * grid + bx] = block.mean(axis=(1, 2))
    return out


def _project_normalize(features: np.ndarray, weights: np.ndarray, name: str) -> np.ndarray:
    raw = features @ weights.T
    check_finite(raw, name)
    return l2_normalize_rows(raw)


class StudentModel:
    """Trainable linear two-tower encoder.

    Weights are plain mutable arrays so a training loop can update them in
    place; encode_* methods are pure functions of the current weights.
    """

    def __init__(
        self,
        embed_dim: int = 16,
        pooled_dim: int = POOL_GRID * POOL_GRID,
        caption_dim: int = 24,
        seed: int = 0,
    ):
        if embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
        if pooled_dim < 1 or caption_dim < 1:
            raise ValueError("pooled_dim and caption_dim must be >= 1")
        self.embed_dim = int(embed_dim)
        self.pooled_dim = int(pooled_dim)
        self.caption_dim = int(caption_dim)
        self.seed = int(seed)
        rows = np.arange(embed_dim, dtype=np.uint64)[:, None]
        img_cols = np.arange(pooled_dim, dtype=np.uint64)[None, :]
        txt_cols = np.arange(caption_dim, dtype=np.uint64)[None, :]
        self.W_img = rng.gaussian(self.seed, rng.STUDENT_INIT, 0, rows, img_cols) / math.sqrt(pooled_dim)
        self.W_txt = rng.gaussian(self.seed, rng.STUDENT_INIT, 1, rows, txt_cols) / math.sqrt(caption_dim)

    def get_params(self, deep: bool = True) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "pooled_dim": self.pooled_dim,
            "caption_dim": self.caption_dim,
            "seed": self.seed,
        }

    def set_params(self, **params) -> "StudentModel":
        allowed = self.get_params()
        for key in params:
            if key not in allowed:
                raise ValueError(f"unknown parameter {key!r} for StudentModel")
        merged = {**allowed, **params}
        self.__init__(**merged)
        return self

    def pool_images(self, images) -> np.ndarray:
        arr = as_float_matrix(images, "images")
        side = int(round(math.sqrt(arr.shape[1])))
        return avgpool(arr, side)

    def project_pooled(self, pooled) -> np.ndarray:
        """Pre-normalization image projection; training code differentiates this."""
        return as_float_matrix(pooled, "pooled") @ self.W_img.T

    def project_captions(self, captions) -> np.ndarray:
        return as_float_matrix(captions, "captions") @ self.W_txt.T

    def encode_images(self, images) -> np.ndarray:
        return _project_normalize(self.pool_images(images), self.W_img, "student image projection")

    def encode_texts(self, captions) -> np.ndarray:
        return _project_normalize(
            as_float_matrix(captions, "captions"), self.W_txt, "student text projection"
        )

    def encode_image(self, image) -> np.ndarray:
        return self.encode_images(np.asarray(image, dtype=np.float64).reshape(1, -1))[0]

    def encode_text(self, caption) -> np.ndarray:
        return self.encode_texts(np.asarray(caption, dtype=np.float64).reshape(1, -1))[0]


class TeacherModel:
    """Frozen linear teacher fitted by ridge regression to per-class targets.

    Target directions in R^{d_k} are seeded from the teacher_id, so distinct
    ids give genuinely different teachers over the same world.  After fit()
    the model is frozen: refitting or changing parameters raises.
    """

    def __init__(
        self,
        teacher_id: str,
        d_k: int = 16,
        ridge_lambda: float = 1e-3,
        logit_scale: float = 70.0,
    ):
        if not teacher_id:
            raise ValueError("teacher_id must be a non-empty string")
        if d_k < 2:
            raise ValueError(f"d_k must be >= 2, got {d_k}")
        if ridge_lambda < 0:
            raise ValueError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
        if not logit_scale > 0:
            raise ValueError(f"logit_scale must be > 0, got {logit_scale}")
        self.teacher_id = str(teacher_id)
        self.d_k = int(d_k)
        self.ridge_lambda = float(ridge_lambda)
        self.logit_scale = float(logit_scale)
        self.P_img: Optional[np.ndarray] = None
        self.P_txt: Optional[np.ndarray] = None
        self.zero_shot_accuracy_: Optional[float] = None
        self.world_fingerprint_: Optional[str] = None

    @property
    def is_fitted(self) -> bool:
        return self.P_img is not None

    def get_params(self, deep: bool = True) -> dict:
        return {
            "teacher_id": self.teacher_id,
            "d_k": self.d_k,
            "ridge_lambda": self.ridge_lambda,
            "logit_scale": self.logit_scale,
        }

    def set_params(self, **params) -> "TeacherModel":
        if self.is_fitted:
            raise RuntimeError("teacher is frozen after fit; create a new instance instead")
        allowed = self.get_params()
        for key in params:
            if key not in allowed:
                raise ValueError(f"unknown parameter {key!r} for TeacherModel")
        merged = {**allowed, **params}
        self.__init__(**merged)
        return self

    def _target_bank(self, num_classes: int) -> np.ndarray:
        tid = rng.str_seed(self.teacher_id)
        classes = np.arange(num_classes, dtype=np.uint64)[:, None]
        coords = np.arange(self.d_k, dtype=np.uint64)[None, :]
        raw = rng.gaussian(tid, rng.TEACHER_TARGET, classes, coords)
        cone = rng.gaussian(tid, rng.TEACHER_CONE, 0, coords[0])
        cone = cone / np.linalg.norm(cone)
        scaled = TARGET_CONE_STRENGTH * math.sqrt(self.d_k) * cone
        return l2_normalize_rows(raw + scaled[None, :])

    @staticmethod
    def _ridge_solve(features: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
        gram = features.T @ features
        dim = gram.shape[0]
        if lam == 0.0:
            rank = np.linalg.matrix_rank(gram)
            if rank < dim:
                raise ValueError(
                    f"normal equations are singular (rank {rank} < {dim}); "
                    "set ridge_lambda > 0"
                )
        try:
            solution = np.linalg.solve(gram + lam * np.eye(dim), features.T @ targets)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"ridge solve failed ({exc}); set ridge_lambda > 0") from None
        return solution.T

    def fit(
        self,
        world: World,
        n_samples: int = DEFAULT_FIT_SAMPLES,
        eval_samples: int = DEFAULT_EVAL_SAMPLES,
    ) -> "TeacherModel":
        if self.is_fitted:
            raise RuntimeError("teacher is frozen after fit; create a new instance instead")
        if n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {n_samples}")
        images, captions, classes = sample_arrays(world, "teacher_fit", 0, n_samples)
        pooled = avgpool(images, world.config.image_side)
        targets = self._target_bank(world.config.num_classes)[classes]
        self.P_img = self._ridge_solve(pooled, targets, self.ridge_lambda)
        self.P_txt = self._ridge_solve(captions.astype(np.float64), targets, self.ridge_lambda)
        self.world_fingerprint_ = world.fingerprint
        self.zero_shot_accuracy_ = self._eval_zero_shot(world, eval_samples)
        return self

    def _eval_zero_shot(self, world: World, n: int) -> float:
        images, _, classes = sample_arrays(world, "eval", 0, n)
        img_emb = self.encode_images(images)
        prompt_emb = self.encode_texts(zero_shot_prompts(world))
        pred = np.argmax(img_emb @ prompt_emb.T, axis=1)
        return float(np.mean(pred == classes))

    def _require_fitted(self) -> None:
        if not self.is_fitted:
            raise RuntimeError("teacher is not fitted; call fit(world) first")

    def encode_images(self, images) -> np.ndarray:
        self._require_fitted()
        arr = as_float_matrix(images, "images")
        side = int(round(math.sqrt(arr.shape[1])))
        return _project_normalize(avgpool(arr, side), self.P_img, "teacher image projection")

    def encode_texts(self, captions) -> np.ndarray:
        self._require_fitted()
        return _project_normalize(
            as_float_matrix(captions, "captions"), self.P_txt, "teacher text projection"
        )

    def encode_image(self, image) -> np.ndarray:
        return self.encode_images(np.asarray(image, dtype=np.float64).reshape(1, -1))[0]

    def encode_text(self, caption) -> np.ndarray:
        return self.encode_texts(np.asarray(caption, dtype=np.float64).reshape(1, -1))[0]


def fit_teacher(
    teacher_id: str,
    d_k: int,
    ridge_lambda: float,
    world: World,
    logit_scale: float = 70.0,
    n_samples: int = DEFAULT_FIT_SAMPLES,
) -> TeacherModel:
    model = TeacherModel(teacher_id, d_k=d_k, ridge_lambda=ridge_lambda, logit_scale=logit_scale)
    return model.fit(world, n_samples=n_samples)


def image_content_key(image) -> int:
    """64-bit key of the image pixels; makes caption noise a pure function
    of image content rather than of sample bookkeeping."""
    buf = np.ascontiguousarray(np.asarray(image, dtype=np.float32)).tobytes()
    return int.from_bytes(hashlib.blake2b(buf, digest_size=8).digest(), "little")


class CaptionerModel:
    """Synthetic caption generator on top of a fitted teacher backbone.

    The backbone classifies the image zero-shot against the world's caption
    prototypes; caption j is the predicted class's prototype plus seeded
    gaussian noise, renormalized.  Deterministic per (image content, j).
    """

    def __init__(
        self,
        captioner_id: str,
        backbone: TeacherModel,
        world: World,
        caption_noise_sigma: float = 0.05,
        seed: int = 0,
    ):
        if not captioner_id:
            raise ValueError("captioner_id must be a non-empty string")
        if caption_noise_sigma < 0:
            raise ValueError(f"caption_noise_sigma must be >= 0, got {caption_noise_sigma}")
        backbone._require_fitted()
        self.captioner_id = str(captioner_id)
        self.backbone = backbone
        self.caption_noise_sigma = float(caption_noise_sigma)
        self.seed = int(seed)
        self._prototypes = zero_shot_prompts(world)
        self._prompt_emb = backbone.encode_texts(self._prototypes)
        self.caption_dim = self._prototypes.shape[1]

    def get_params(self, deep: bool = True) -> dict:
        return {
            "captioner_id": self.captioner_id,
            "caption_noise_sigma": self.caption_noise_sigma,
            "seed": self.seed,
        }

    def predict_classes(self, images) -> np.ndarray:
        emb = self.backbone.encode_images(images)
        return np.argmax(emb @ self._prompt_emb.T, axis=1)

    def generate_synthetic_captions(self, image, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        arr = np.asarray(image, dtype=np.float64).reshape(1, -1)
        if n == 0:
            return np.zeros((0, self.caption_dim), dtype=np.float32)
        cls = int(self.predict_classes(arr)[0])
        key = image_content_key(image)
        slots = np.arange(n, dtype=np.uint64)[:, None]
        coords = np.arange(self.caption_dim, dtype=np.uint64)[None, :]
        noise = rng.gaussian(self.seed, rng.SYN_CAPTION_NOISE, key, slots, coords)
        caps = self._prototypes[cls][None, :] + self.caption_noise_sigma * noise
        return l2_normalize_rows(caps).astype(np.float32)

    def generate_batch(self, images, n: int) -> np.ndarray:
        arr = as_float_matrix(images, "images")
        out = np.zeros((arr.shape[0], n, self.caption_dim), dtype=np.float32)
        for i in range(arr.shape[0]):
            out[i] = self.generate_synthetic_captions(arr[i], n)
        return out


def save_model(path: str, model) -> str:
    """Serialize a student or teacher to a .model envelope file."""
    if isinstance(model, TeacherModel):
        model._require_fitted()
        arrays = [("P_img", model.P_img), ("P_txt", model.P_txt)]
        meta = {
            "kind": "teacher",
            "params": model.get_params(),
            "zero_shot_accuracy": model.zero_shot_accuracy_,
            "world_fingerprint": model.world_fingerprint_,
        }
    elif isinstance(model, StudentModel):
        arrays = [("W_img", model.W_img), ("W_txt", model.W_txt)]
        meta = {"kind": "student", "params": model.get_params()}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    meta["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return container.write_container(path, MODEL_MAGIC, meta, payload)


def _expected_model_payload(meta: dict) -> int:
    return sum(8 * int(np.prod(spec["shape"])) for spec in meta["arrays"])


def load_model(path: str):
    meta, payload = container.read_container(path, MODEL_MAGIC, "model", _expected_model_payload)
    arrays = {}
    offset = 0
    for spec in meta["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape))
        arrays[spec["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += 8 * count
    kind = meta.get("kind")
    if kind == "teacher":
        model = TeacherModel(**meta["params"])
        model.P_img = arrays["P_img"]
        model.P_txt = arrays["P_txt"]
        model.zero_shot_accuracy_ = meta.get("zero_shot_accuracy")
        model.world_fingerprint_ = meta.get("world_fingerprint")
        check_finite(model.P_img, "P_img")
        check_finite(model.P_txt, "P_txt")
        return model
    if kind == "student":
        model = StudentModel(**meta["params"])
        model.W_img = arrays["W_img"]
        model.W_txt = arrays["W_txt"]
        check_finite(model.W_img, "W_img")
        check_finite(model.W_txt, "W_txt")
        return model
    raise ValueError(f"corrupt model: unknown kind {kind!r}")
