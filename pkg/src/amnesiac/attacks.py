"""White-box privacy attacks: class model inversion and shadow-model
membership inference.

Every entry point takes only the current model and data the adversary
holds. Nothing here accepts a journal, a removal request or an earlier
version of the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from amnesiac._rng import derive_seed, generator
from amnesiac.data import Dataset, split
from amnesiac.nn import Architecture, DivergenceError, Model, TrainConfig, backward, init_model, softmax, train

MEMBER_THRESHOLD = 0.5
ATTACK_HIDDEN = (256, 128)


class AttackError(ValueError):
    pass


# --------------------------------------------------------------------------
# model inversion


@dataclass(frozen=True)
class InversionConfig:
    target_class: int
    total_steps: int = 5000
    step_size: float = 1.0
    process_interval: int = 500
    noise_scale: float = 0.1
    seed: int = 0
    allow_any_interval: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.process_interval < 1:
            raise ValueError("process_interval must be positive")
        if not self.allow_any_interval and not 500 <= self.process_interval <= 1000:
            raise ValueError("process_interval must lie in [500, 1000] unless allow_any_interval is set")


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)])
    h, w = img.shape[-2:]
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            out += padded[..., i : i + h, j : j + w]
    return out / img.dtype.type(9)


def _image_view(x: np.ndarray) -> np.ndarray:
    if x.ndim >= 2:
        return x
    side = int(round(np.sqrt(x.size)))
    if side * side != x.size:
        raise AttackError(f"cannot view a vector of length {x.size} as an image")
    return x.reshape(side, side)


def process_image(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], then 3x3 box blur (zero padding) over the last two
    axes. Flat square vectors are treated as images and returned flat."""
    img = np.asarray(image, dtype=np.float32)
    view = _image_view(np.clip(img, 0.0, 1.0))
    return _box_blur(view).reshape(img.shape)


def invert_class(model: Model, config: InversionConfig) -> np.ndarray:
    """Gradient descent on the input toward ``config.target_class``.

    Starts from zeros plus uniform [0, noise_scale) noise, runs exactly
    ``total_steps`` steps, clamps to the pixel range after each step and
    applies ``process_image`` every ``process_interval`` steps. Returns an
    array of the model's input shape.
    """
    if not 0 <= config.target_class < model.class_count:
        raise AttackError(f"target class {config.target_class} outside [0, {model.class_count})")
    shape = model.architecture.input_shape
    rng = generator(config.seed, "invert", config.target_class)
    x = np.zeros((1, *shape), dtype=np.float32)
    if config.noise_scale:
        x += rng.uniform(0.0, config.noise_scale, size=x.shape).astype(np.float32)
    label = np.array([config.target_class])
    step = np.float32(config.step_size)
    for i in range(1, config.total_steps + 1):
        _, gx, _ = backward(model, x, label)
        if not np.all(np.isfinite(gx)):
            raise DivergenceError(f"non-finite input gradient at step {i}")
        x = np.clip(x - step * gx, 0.0, 1.0)
        if i % config.process_interval == 0:
            x = process_image(x[0])[None]
    return np.clip(x[0], 0.0, 1.0)


def recognizability_score(oracle_model: Model, image: np.ndarray, target_class: int) -> float:
    """Proxy metric: the held-out oracle's softmax probability of the target
    class. Not a substitute for looking at the images."""
    probs = softmax(oracle_model.forward(np.asarray(image, dtype=np.float32)[None]).astype(np.float64))
    return float(probs[0, target_class])


def reject_examples(data: Dataset, count: int, seed: int) -> np.ndarray:
    """Images that are not digits, for the oracle's reject class.

    A third each of uniform noise at random contrast, blurred high-contrast
    noise, and real images with their 7x7 tiles shuffled. The last kind
    keeps stroke fragments without a digit's layout, which is what
    inversions against a model that forgot a class tend to look like.
    """
    shape = data.feature_shape
    if int(np.prod(shape)) != 784:
        raise AttackError(f"reject examples need 28x28 images, got {shape}")
    rng = generator(seed, "reject")
    k = count // 3
    noise = rng.uniform(0, 1, (k, 28, 28)) * rng.uniform(0.2, 1, (k, 1, 1))
    blurred = _box_blur(_box_blur(rng.uniform(0, 1, (k, 28, 28))))
    blurred = np.clip((blurred - 0.5) * 3 + 0.5, 0, 1)
    src = data.features[rng.integers(0, len(data), count - 2 * k)].reshape(-1, 4, 7, 4, 7)
    tiles = src.transpose(0, 1, 3, 2, 4).reshape(-1, 16, 7, 7)
    tiles = np.stack([t[rng.permutation(16)] for t in tiles])
    shuffled = tiles.reshape(-1, 4, 4, 7, 7).transpose(0, 1, 3, 2, 4).reshape(-1, 28, 28)
    out = np.concatenate([noise, blurred, shuffled]).astype(np.float32)
    return out.reshape(count, *shape)


def train_oracle(data: Dataset, *, epochs: int = 5, seed: int = 99, hidden=(256, 128)) -> Model:
    """Held-out recognizability oracle with one extra "not a digit" class.

    A plain classifier assigns confident labels to noise and stroke
    fragments, so its score cannot tell a digit from a smear.
    """
    junk = reject_examples(data, max(3, len(data) // 5), seed)
    reject = data.class_count
    start = data.next_id()
    extra = Dataset(np.arange(start, start + len(junk)), junk, np.full(len(junk), reject), reject + 1)
    widened = Dataset(data.ids, data.features, data.labels, reject + 1).concat(extra)
    oracle = init_model(Architecture.mlp(int(np.prod(data.feature_shape)), *hidden, reject + 1), seed)
    train(oracle, widened, TrainConfig(epochs, 32, 0.1, seed))
    return oracle


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = _image_view(np.asarray(image, dtype=np.float64).squeeze())
    if img.ndim != 2:
        raise AttackError(f"PGM needs a single-channel image, got shape {img.shape}")
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise AttackError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# membership inference


@dataclass(frozen=True)
class ShadowConfig:
    shadow_count: int = 16
    shadow_epochs: int = 10
    split_seed: int = 0
    batch_size: int = 32
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.shadow_count < 2:
            raise ValueError("need at least two shadow models")
        if self.shadow_epochs < 1:
            raise ValueError("shadow_epochs must be positive")


@dataclass
class Shadow:
    model: Model
    in_ids: frozenset[int]
    out_ids: frozenset[int]

    def __iter__(self):
        return iter((self.model, self.in_ids, self.out_ids))


def train_shadows(data_pool: Dataset, architecture: Architecture, config: ShadowConfig) -> list[Shadow]:
    """Train each shadow on its own seeded half of the pool."""
    if len(data_pool) < 2 * max(config.batch_size, data_pool.class_count):
        raise AttackError(f"pool of {len(data_pool)} examples is too small for in/out halves")
    shadows = []
    for i in range(config.shadow_count):
        member, non_member = split(data_pool, 0.5, seed=derive_seed(config.split_seed, "shadow-split", i))
        seed = derive_seed(config.split_seed, "shadow-model", i)
        model = init_model(architecture, seed)
        cfg = TrainConfig(config.shadow_epochs, min(config.batch_size, len(member)), config.learning_rate, seed)
        train(model, member, cfg)
        shadows.append(Shadow(model, frozenset(member.ids.tolist()), frozenset(non_member.ids.tolist())))
    return shadows


@dataclass
class AttackDataset:
    features: np.ndarray  # prediction vectors, one row per (shadow, example)
    labels: np.ndarray  # 1 = member of that shadow's training data


def prediction_vectors(model: Model, features: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Softmax prediction vectors in class order (not sorted)."""
    out = [softmax(model.forward(features[s : s + chunk]).astype(np.float64)) for s in range(0, len(features), chunk)]
    return np.concatenate(out).astype(np.float32) if out else np.zeros((0, model.class_count), np.float32)


def build_attack_dataset(shadows: list[Shadow], data_pool: Dataset) -> dict[int, AttackDataset]:
    """One dataset per true class: each shadow's prediction vector for each
    pool example, labelled with whether the shadow trained on it."""
    feats: dict[int, list[np.ndarray]] = {}
    labs: dict[int, list[np.ndarray]] = {}
    for shadow in shadows:
        known = np.isin(data_pool.ids, np.fromiter(shadow.in_ids | shadow.out_ids, dtype=np.uint64))
        pool = data_pool.take(known)
        vectors = prediction_vectors(shadow.model, pool.features)
        member = np.isin(pool.ids, np.fromiter(shadow.in_ids, dtype=np.uint64)).astype(np.int64)
        for c in np.unique(pool.labels).tolist():
            m = pool.labels == c
            feats.setdefault(c, []).append(vectors[m])
            labs.setdefault(c, []).append(member[m])
    return {c: AttackDataset(np.concatenate(feats[c]), np.concatenate(labs[c])) for c in sorted(feats)}


@dataclass
class AttackSuite:
    per_class_models: dict[int, Model] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.per_class_models)

    def member_probability(self, vectors: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """Sigmoid output of the class-matched attack model; NaN where no
        attack model exists for the class."""
        out = np.full(len(vectors), np.nan)
        for c, model in self.per_class_models.items():
            m = classes == c
            if m.any():
                out[m] = model.predict_proba(vectors[m])
        return out

    def predict_member(self, vectors: np.ndarray, classes: np.ndarray) -> np.ndarray:
        p = self.member_probability(vectors, classes)
        return np.nan_to_num(p, nan=0.0) >= MEMBER_THRESHOLD


def attack_architecture(class_count: int) -> Architecture:
    return Architecture.mlp(class_count, *ATTACK_HIDDEN, 1)


def train_attack_suite(
    attack_datasets: dict[int, AttackDataset],
    *,
    epochs: int = 60,
    batch_size: int = 64,
    learning_rate: float = 0.1,
    seed: int = 0,
) -> AttackSuite:
    """One 256/128 ReLU MLP with a sigmoid output per class, trained with
    SGD on binary cross-entropy."""
    suite = AttackSuite()
    for c, ds in sorted(attack_datasets.items()):
        if len(ds.labels) == 0 or len(np.unique(ds.labels)) < 2:
            raise AttackError(f"attack dataset for class {c} needs both member and non-member rows")
        n, k = ds.features.shape
        data = Dataset(np.arange(n, dtype=np.uint64), ds.features, ds.labels, 2)
        s = derive_seed(seed, "attack", c)
        model = init_model(attack_architecture(k), s)
        train(model, data, TrainConfig(epochs, min(batch_size, n), learning_rate, s))
        suite.per_class_models[c] = model
    return suite


def membership_recall(suite: AttackSuite, target_model: Model, probe_examples: Dataset, ground_truth_members) -> float:
    """TP / actual positives over the probes; 'member' means the attack
    model's sigmoid output is at least 0.5."""
    if len(probe_examples) == 0:
        raise AttackError("no probe examples")
    members = np.isin(probe_examples.ids, np.fromiter((int(i) for i in ground_truth_members), dtype=np.uint64))
    positives = int(members.sum())
    if positives == 0:
        raise AttackError("probe set contains no actual members")
    vectors = prediction_vectors(target_model, probe_examples.features)
    flagged = suite.predict_member(vectors, probe_examples.labels)
    return int(np.sum(flagged & members)) / positives
