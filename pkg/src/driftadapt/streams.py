"""Synthetic non-stationary support/query stream generation and CSV ingestion.

Streams are pairs of sequentially arriving datasets: a labeled support set
and an unlabeled query set per environment. Task drift assigns each
environment a disjoint, consecutive label range; domain drift keeps the
label set fixed and varies the query input distribution through affine
transforms plus noise. Hidden query labels ride along for evaluation only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

BLOB_RING_RADIUS = 3.0

SCENARIOS = ("task_drift", "domain_drift", "combined")


@dataclass(frozen=True)
class DomainTransform:
    """Affine map plus additive noise standing in for one domain."""

    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)
    scale: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"transform scale must be positive, got {self.scale}")
        if self.noise_std < 0:
            raise ValueError(f"transform noise_std must be nonnegative, got {self.noise_std}")

    def magnitude(self):
        """Sort key for adaptation difficulty: rotation angle first."""
        tx, ty = self.translation
        return (abs(self.rotation), float(np.hypot(tx, ty)), abs(np.log(self.scale)), self.noise_std)

    def is_identity(self):
        return self.magnitude() == (0.0, 0.0, 0.0, 0.0)


IDENTITY_TRANSFORM = DomainTransform()


@dataclass
class StreamSpec:
    scenario: str = "task_drift"
    base: str = "blobs"  # "moons" (2 classes) or "blobs" (num_classes on a ring)
    num_classes: int = 10
    classes_per_task: list = field(default_factory=lambda: [2, 2, 2, 2, 2])
    transforms: list = field(default_factory=lambda: [IDENTITY_TRANSFORM, IDENTITY_TRANSFORM])
    samples_per_class: int = 100
    base_noise: float = 0.25
    ordering: str = "given"  # domain_drift only: given | ascending | descending
    seed: int = 0

    @property
    def num_environments(self):
        if self.scenario == "domain_drift":
            return len(self.transforms) - 1
        return len(self.classes_per_task)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.base not in ("moons", "blobs"):
            raise ValueError(f"base must be moons or blobs, got {self.base!r}")
        if self.base == "moons" and self.num_classes != 2:
            raise ValueError("moons base has exactly 2 classes; set num_classes=2")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be positive, got {self.samples_per_class}")
        if self.base_noise < 0:
            raise ValueError(f"base_noise must be nonnegative, got {self.base_noise}")
        if self.scenario in ("task_drift", "combined"):
            if not self.classes_per_task or any(c < 1 for c in self.classes_per_task):
                raise ValueError("classes_per_task must be a nonempty list of positive counts")
            if sum(self.classes_per_task) != self.num_classes:
                raise ValueError(
                    f"classes_per_task must sum to num_classes: "
                    f"sum({self.classes_per_task}) != {self.num_classes}")
        if self.scenario == "task_drift" and len(self.transforms) != 2:
            raise ValueError("task_drift needs exactly 2 transforms: [support domain, query domain]")
        if self.scenario == "domain_drift" and len(self.transforms) < 2:
            raise ValueError("domain_drift needs transforms: [support domain, query domain 1, ...]")
        if self.scenario == "combined" and len(self.transforms) < 2:
            raise ValueError("combined needs a pool of at least 2 transforms")
        if self.ordering not in ("given", "ascending", "descending"):
            raise ValueError(f"ordering must be given/ascending/descending, got {self.ordering!r}")

    def label_ranges(self):
        """Consecutive disjoint label ranges, one per task."""
        edges = np.cumsum([0] + list(self.classes_per_task))
        return [list(range(edges[i], edges[i + 1])) for i in range(len(self.classes_per_task))]


class Environment:
    """One time step of the stream: labeled support, unlabeled query.

    Hidden query labels are reachable only through ``eval_labels()``;
    training code must never call it (the test suite scans for this).
    """

    def __init__(self, index, support_x, support_y, query_x, query_labels):
        self.index = index
        self.support_x = np.asarray(support_x, dtype=np.float64)
        self.support_y = np.asarray(support_y, dtype=np.intp)
        self.query_x = np.asarray(query_x, dtype=np.float64)
        self._hidden_labels = np.asarray(query_labels, dtype=np.intp)

    @property
    def input_dim(self):
        return self.support_x.shape[1]

    def classes(self):
        return np.unique(self.support_y)

    def eval_labels(self):
        """Evaluation-only accessor for the hidden query labels."""
        return self._hidden_labels

    def __repr__(self):
        return (f"Environment(index={self.index}, support={self.support_x.shape}, "
                f"query={self.query_x.shape})")


def sample_base(spec, class_idx, n, rng):
    """Draw n points from the class-conditional base distribution."""
    if class_idx < 0 or class_idx >= spec.num_classes:
        raise ValueError(f"class {class_idx} invalid for {spec.num_classes}-class base")
    if n == 0:
        return np.zeros((0, 2))
    if spec.base == "moons":
        t = rng.uniform(0.0, np.pi, size=n)
        if class_idx == 0:
            pts = np.column_stack([np.cos(t), np.sin(t)])
        else:
            pts = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    else:
        angle = 2.0 * np.pi * class_idx / spec.num_classes
        center = BLOB_RING_RADIUS * np.array([np.cos(angle), np.sin(angle)])
        pts = np.tile(center, (n, 1))
    if spec.base_noise > 0:
        pts = pts + rng.normal(scale=spec.base_noise, size=pts.shape)
    return pts


def apply_transform(X, t, rng):
    """Rotate, scale, translate each row, then add Gaussian noise."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != 2:
        raise ValueError(f"apply_transform expects 2 columns, got {X.shape}")
    c, s = np.cos(t.rotation), np.sin(t.rotation)
    rot = np.array([[c, -s], [s, c]])
    out = t.scale * (X @ rot.T) + np.asarray(t.translation)
    if t.noise_std > 0:
        out = out + rng.normal(scale=t.noise_std, size=out.shape)
    return out


def _sample_environment(spec, classes, support_t, query_t, rng):
    xs, ys = [], []
    for c in classes:
        xs.append(sample_base(spec, c, spec.samples_per_class, rng))
        ys.append(np.full(spec.samples_per_class, c, dtype=np.intp))
    support_x = apply_transform(np.vstack(xs), support_t, rng)
    support_y = np.concatenate(ys)
    xq, yq = [], []
    for c in classes:
        xq.append(sample_base(spec, c, spec.samples_per_class, rng))
        yq.append(np.full(spec.samples_per_class, c, dtype=np.intp))
    query_x = apply_transform(np.vstack(xq), query_t, rng)
    query_y = np.concatenate(yq)
    perm_s = rng.permutation(len(support_y))
    perm_q = rng.permutation(len(query_y))
    return support_x[perm_s], support_y[perm_s], query_x[perm_q], query_y[perm_q]


def build_scenario1(spec):
    """Task drift within streams, one fixed domain shift across streams."""
    spec.validate()
    if spec.scenario != "task_drift":
        raise ValueError(f"build_scenario1 needs scenario=task_drift, got {spec.scenario!r}")
    rng = np.random.default_rng(spec.seed)
    envs = []
    for i, classes in enumerate(spec.label_ranges()):
        sx, sy, qx, qy = _sample_environment(spec, classes, spec.transforms[0], spec.transforms[1], rng)
        envs.append(Environment(i, sx, sy, qx, qy))
    return envs


def build_scenario2(spec):
    """Domain drift: fixed support domain, per-environment query domains."""
    spec.validate()
    if spec.scenario != "domain_drift":
        raise ValueError(f"build_scenario2 needs scenario=domain_drift, got {spec.scenario!r}")
    rng = np.random.default_rng(spec.seed)
    query_ts = list(spec.transforms[1:])
    if spec.ordering != "given":
        query_ts.sort(key=lambda t: t.magnitude(), reverse=(spec.ordering == "descending"))
    classes = list(range(spec.num_classes))
    envs = []
    for i, qt in enumerate(query_ts):
        sx, sy, qx, qy = _sample_environment(spec, classes, spec.transforms[0], qt, rng)
        envs.append(Environment(i, sx, sy, qx, qy))
    return envs


def combined_assignment(spec, rng):
    """Seeded random (support, query) transform indices, one pair per task.

    The support index is uniform over the pool; the query index is uniform
    over the remaining ones, so the two always differ.
    """
    pairs = []
    pool_size = len(spec.transforms)
    for _ in spec.classes_per_task:
        s_idx = int(rng.integers(pool_size))
        q_idx = int(rng.integers(pool_size - 1))
        if q_idx >= s_idx:
            q_idx += 1
        pairs.append((s_idx, q_idx))
    return pairs


def build_combined(spec, rng=None):
    """Task drift plus per-environment random (support, query) domain pairs."""
    spec.validate()
    if spec.scenario != "combined":
        raise ValueError(f"build_combined needs scenario=combined, got {spec.scenario!r}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    pool = spec.transforms
    envs = []
    for i, (classes, (s_idx, q_idx)) in enumerate(zip(spec.label_ranges(),
                                                      combined_assignment(spec, rng))):
        sx, sy, qx, qy = _sample_environment(spec, classes, pool[s_idx], pool[q_idx], rng)
        envs.append(Environment(i, sx, sy, qx, qy))
    return envs


def build_stream(spec):
    """Dispatch on spec.scenario."""
    if spec.scenario == "task_drift":
        return build_scenario1(spec)
    if spec.scenario == "domain_drift":
        return build_scenario2(spec)
    return build_combined(spec)


def sample_support(env, n, rng):
    idx = rng.integers(0, len(env.support_y), size=n)
    return env.support_x[idx], env.support_y[idx]


def sample_query(env, n, rng):
    idx = rng.integers(0, len(env.query_x), size=n)
    return env.query_x[idx]


# ---------------------------------------------------------------------------
# CSV interchange: header env,role,label,f0,...  role in {support, query},
# label -1 permitted for query rows
# ---------------------------------------------------------------------------

def export_csv(envs, path):
    """Write environments in the interchange schema (lossless float repr)."""
    dim = envs[0].input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env", "role", "label"] + [f"f{i}" for i in range(dim)])
        for env in envs:
            for x, y in zip(env.support_x, env.support_y):
                writer.writerow([env.index, "support", int(y)] + [repr(float(v)) for v in x])
            for x, y in zip(env.query_x, env.eval_labels()):
                writer.writerow([env.index, "query", int(y)] + [repr(float(v)) for v in x])


def ingest_csv(path):
    """Assemble environments from interchange rows, validating as we go."""
    support = {}
    query = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("no environments: file is empty") from None
        if header[:3] != ["env", "role", "label"] or len(header) < 4:
            raise ValueError(f"bad header: expected env,role,label,f0,... got {header}")
        dim = len(header) - 3
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3 + dim:
                raise ValueError(f"row {row_no}: expected {3 + dim} columns, got {len(row)}")
            try:
                env_idx = int(row[0])
                label = int(row[2])
                feats = [float(v) for v in row[3:]]
            except ValueError:
                raise ValueError(f"row {row_no}: malformed numeric field") from None
            role = row[1]
            if role not in ("support", "query"):
                raise ValueError(f"row {row_no}: role must be support or query, got {role!r}")
            if role == "support" and label < 0:
                raise ValueError(f"row {row_no}: support rows must be labeled")
            bucket = support if role == "support" else query
            bucket.setdefault(env_idx, []).append((label, feats))
    if not support and not query:
        raise ValueError("no environments: file has a header but no rows")
    for env_idx in query:
        if env_idx not in support:
            raise ValueError(f"query environment {env_idx} has no support set "
                             "(support must arrive before its query)")
    envs = []
    for env_idx in sorted(support):
        s_rows = support[env_idx]
        q_rows = query.get(env_idx, [])
        envs.append(Environment(
            env_idx,
            np.array([f for _, f in s_rows]),
            np.array([l for l, _ in s_rows], dtype=np.intp),
            np.array([f for _, f in q_rows]).reshape(len(q_rows), dim),
            np.array([l for l, _ in q_rows], dtype=np.intp),
        ))
    return envs
