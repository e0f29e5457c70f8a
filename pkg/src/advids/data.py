"""NSL-KDD parsing, train/test splitting, one-hot encoding and standardization."""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, ParseError, StructuralError

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
CATEGORICAL = ("protocol_type", "service", "flag")
NUMERIC_NAMES = tuple(n for n in FEATURE_NAMES if n not in CATEGORICAL)
N_FIELDS = len(FEATURE_NAMES) + 2  # + attack label, difficulty

CLASS_NAMES = ("normal", "anomaly")

# attack name -> coarse attack category
ATTACK_CATEGORIES = {
    "normal": "normal",
    **dict.fromkeys(
        ["back", "land", "neptune", "pod", "smurf", "teardrop", "apache2",
         "mailbomb", "processtable", "udpstorm"], "dos"),
    **dict.fromkeys(["ipsweep", "nmap", "portsweep", "satan", "mscan", "saint"], "probe"),
    **dict.fromkeys(
        ["ftp_write", "guess_passwd", "imap", "multihop", "phf", "spy",
         "warezclient", "warezmaster", "named", "sendmail", "snmpgetattack",
         "snmpguess", "xlock", "xsnoop", "worm"], "r2l"),
    **dict.fromkeys(
        ["buffer_overflow", "loadmodule", "perl", "rootkit", "httptunnel", "ps",
         "sqlattack", "xterm"], "u2r"),
}
CATEGORY_ORDER = ("normal", "dos", "probe", "r2l", "u2r")

# reference (training, test) record counts per category for the standard 80/20 split
REFERENCE_COUNTS = {
    "normal": (53875, 13468),
    "dos": (36742, 9185),
    "probe": (9325, 2331),
    "r2l": (796, 199),
    "u2r": (42, 10),
}


@dataclass(frozen=True, slots=True)
class RawRecord:
    numeric: tuple
    protocol_type: str
    service: str
    flag: str
    attack_label: str
    difficulty: int
    # difficulty is retained for provenance only and never encoded
    exclude_difficulty: bool = True

    @property
    def is_normal(self):
        return self.attack_label == "normal"

    @property
    def category(self):
        return ATTACK_CATEGORIES.get(self.attack_label, "unknown")


def parse_line(line, lineno=None):
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != N_FIELDS:
        raise StructuralError(f"expected {N_FIELDS} fields, found {len(fields)}", line=lineno)
    fields = [f.strip() for f in fields]
    cats = {}
    numeric = []
    for name, value in zip(FEATURE_NAMES, fields):
        if name in CATEGORICAL:
            if not value:
                raise ParseError(f"empty categorical field {name!r}", line=lineno)
            cats[name] = value
        else:
            try:
                x = float(value)
            except ValueError:
                raise ParseError(f"non-numeric value {value!r} in field {name!r}", line=lineno) from None
            if not math.isfinite(x):
                raise ParseError(f"non-finite value in field {name!r}", line=lineno)
            numeric.append(x)
    label = fields[-2].lower().rstrip(".")
    if not label:
        raise ParseError("empty attack label", line=lineno)
    try:
        difficulty = int(fields[-1])
    except ValueError:
        raise ParseError(f"non-integer difficulty {fields[-1]!r}", line=lineno) from None
    return RawRecord(tuple(numeric), attack_label=label, difficulty=difficulty, **cats)


def parse_csv(path):
    """Read an NSL-KDD text file (no header, 43 comma-separated fields per line)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            records.append(parse_line(line, lineno))
    return records


def format_record(rec):
    """Inverse of :func:`parse_line` (numbers rendered in shortest round-trip form)."""
    vals = iter(rec.numeric)
    out = []
    for name in FEATURE_NAMES:
        if name in CATEGORICAL:
            out.append(getattr(rec, name))
        else:
            x = next(vals)
            out.append(str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x))
    out += [rec.attack_label, str(rec.difficulty)]
    return ",".join(out)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    shuffle_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def split_indices(n, spec):
    """Seeded uniform shuffle; the first round(n * fraction) shuffled indices are test."""
    n_test = int(round(n * spec.test_fraction))
    perm = np.random.default_rng(spec.shuffle_seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split(records, spec=SplitSpec()):
    train_idx, test_idx = split_indices(len(records), spec)
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


@dataclass(frozen=True)
class FeatureSchema:
    """Categorical vocabularies and per-column standardization statistics.

    Encoded column layout: the 38 numeric features in file order, followed by
    one-hot groups for protocol_type, service and flag (vocabulary order).
    ``stds`` keeps the raw standard deviation (0 for constant columns); the
    divisor used at transform time is :attr:`divisors`.
    """

    categorical_vocabs: dict
    means: np.ndarray
    stds: np.ndarray
    standardize_onehot: bool = True

    @property
    def encoded_dim(self):
        return len(NUMERIC_NAMES) + sum(len(v) for v in self.categorical_vocabs.values())

    @property
    def column_names(self):
        names = list(NUMERIC_NAMES)
        for cat in CATEGORICAL:
            names += [f"{cat}:{v}" for v in self.categorical_vocabs[cat]]
        return names

    @property
    def divisors(self):
        return np.where(self.stds > 0, self.stds, 1.0)

    def to_kv(self):
        items = {
            "format": "advids-schema/1",
            "encoded_dim": self.encoded_dim,
            "standardize_onehot": self.standardize_onehot,
        }
        for cat in CATEGORICAL:
            items[f"vocab.{cat}"] = list(self.categorical_vocabs[cat])
        for name, mu, sd in zip(self.column_names, self.means, self.stds):
            items[f"stat.{name}"] = [float(mu), float(sd)]
        return items

    @classmethod
    def from_kv(cls, items):
        if items.get("format") != "advids-schema/1":
            raise ParseError(f"unsupported schema format {items.get('format')!r}")
        vocabs = {}
        for cat in CATEGORICAL:
            raw = items[f"vocab.{cat}"]
            vocabs[cat] = tuple(raw.split(",")) if raw else ()
        proto = cls(vocabs, np.zeros(0), np.zeros(0))
        stats = [items[f"stat.{name}"].split(",") for name in proto.column_names]
        means = np.array([float(m) for m, _ in stats])
        stds = np.array([float(s) for _, s in stats])
        schema = cls(vocabs, means, stds, items.get("standardize_onehot", "true") == "true")
        if schema.encoded_dim != int(items["encoded_dim"]):
            raise ParseError("encoded_dim does not match vocabularies")
        return schema

    def save(self, path):
        fileio.write_kv(path, self.to_kv(), header="feature schema: vocabularies and column mean,std")

    @classmethod
    def load(cls, path):
        return cls.from_kv(fileio.read_kv(path))


@dataclass
class EncodedDataset:
    features: np.ndarray
    labels: np.ndarray
    source_split: str = "train"
    categories: tuple = ()
    unseen: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (len(self.features), 2):
            raise ValueError(
                f"inconsistent shapes: features {self.features.shape}, labels {self.labels.shape}")

    def __len__(self):
        return len(self.features)

    @property
    def classes(self):
        return np.argmax(self.labels, axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        cats = tuple(np.asarray(self.categories, dtype=object)[idx]) if self.categories else ()
        return EncodedDataset(self.features[idx], self.labels[idx], self.source_split, cats)

    def sample(self, n, seed=0):
        """Seeded subsample without replacement (whole set if n >= len)."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx)

    def save(self, path):
        with fileio.atomic_write(path, "wb") as fh:
            fileio.write_matrix(fh, self.features)
            fileio.write_matrix(fh, self.labels)

    @classmethod
    def load(cls, path, source_split=None):
        with open(path, "rb") as fh:
            features = fileio.read_matrix(fh)
            labels = fileio.read_matrix(fh)
        if source_split is None:
            source_split = Path(path).stem
        return cls(features, labels, source_split)

    def fingerprint(self):
        return fileio.sha256_arrays(self.features, self.labels)


def fit_schema(train, standardize_onehot=True):
    """Collect vocabularies and column statistics from the training split only."""
    if not train:
        raise ConfigError("cannot fit a schema on an empty training set")
    vocabs = {cat: tuple(sorted({getattr(r, cat) for r in train})) for cat in CATEGORICAL}
    # placeholder stats so expand() knows the layout
    schema = FeatureSchema(vocabs, np.zeros(0), np.zeros(0), standardize_onehot)
    raw, _ = _expand(train, schema)
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    constant = raw.max(axis=0) == raw.min(axis=0)
    means[constant] = raw[0, constant]
    stds[constant] = 0.0
    if not standardize_onehot:
        n_num = len(NUMERIC_NAMES)
        means[n_num:] = 0.0
        stds[n_num:] = 1.0
    return FeatureSchema(vocabs, means, stds, standardize_onehot)


def _expand(records, schema):
    n = len(records)
    n_num = len(NUMERIC_NAMES)
    out = np.zeros((n, schema.encoded_dim))
    if n:
        out[:, :n_num] = np.array([r.numeric for r in records], dtype=np.float64)
    unseen = Counter()
    offset = n_num
    for cat in CATEGORICAL:
        vocab = schema.categorical_vocabs[cat]
        index = {v: i for i, v in enumerate(vocab)}
        for row, rec in enumerate(records):
            j = index.get(getattr(rec, cat))
            if j is None:
                unseen[f"{cat}:{getattr(rec, cat)}"] += 1
            else:
                out[row, offset + j] = 1.0
        offset += len(vocab)
    return out, dict(unseen)


def expand(records, schema):
    """Numeric columns plus one-hot groups, before standardization."""
    return _expand(records, schema)[0]


def binary_labels(records):
    labels = np.zeros((len(records), 2))
    anomaly = np.fromiter((not r.is_normal for r in records), dtype=bool, count=len(records))
    labels[np.arange(len(records)), anomaly.astype(int)] = 1.0
    return labels


def encode(records, schema, source_split="train"):
    raw, unseen = _expand(records, schema)
    if unseen:
        log.warning("%s split: %d unseen categorical values encoded as all-zero groups: %s",
                    source_split, sum(unseen.values()), unseen)
    features = (raw - schema.means) / schema.divisors
    if not np.all(np.isfinite(features)):
        raise ParseError("non-finite values after standardization")
    cats = tuple(r.category for r in records)
    return EncodedDataset(features, binary_labels(records), source_split, cats, unseen)


def class_distribution(records):
    counts = Counter(r.category for r in records)
    return {c: counts.get(c, 0) for c in CATEGORY_ORDER + (("unknown",) if counts.get("unknown") else ())}


def split_report(train, test):
    """Per-category counts and proportions of both splits next to the reference table."""
    rows = []
    for split_name, recs, col in (("train", train, 0), ("test", test, 1)):
        counts = class_distribution(recs)
        n = len(recs)
        ref_total = sum(v[col] for v in REFERENCE_COUNTS.values())
        for cat, count in counts.items():
            ref = REFERENCE_COUNTS.get(cat, (0, 0))[col]
            rows.append({
                "split": split_name,
                "category": cat,
                "count": count,
                "proportion": count / n if n else 0.0,
                "reference_count": ref,
                "reference_proportion": ref / ref_total,
            })
    return rows


def max_proportion_gap(report):
    return max(abs(r["proportion"] - r["reference_proportion"]) for r in report)


def format_split_report(report):
    lines = ["split,category,count,proportion,reference_count,reference_proportion"]
    for r in report:
        lines.append(f"{r['split']},{r['category']},{r['count']},{r['proportion']:.6f},"
                     f"{r['reference_count']},{r['reference_proportion']:.6f}")
    return "\n".join(lines) + "\n"
