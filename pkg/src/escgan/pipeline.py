"""Stage orchestration, dataset manifests, k-fold evaluation and reporting.

A run directory holds every artifact a stage produces::

    audio1d/        pitch-shifted WAVs               (augment1d)
    spectrograms/   raw/ and enhanced/ PGM images    (spectrogram, enhance)
    gan/foldK/      checkpoints, histories, pairs,
                    images/ of generated PGMs        (gan-train, gan-generate)
    features/       one SURF dump per image          (features)
    models/         foldK.skmc / foldK.rfst          (codebook, train)
    metrics/        metrics.json, confusion tables   (evaluate)
    index/          provenance tables per stage
    state/          content hashes for idempotence
    reports/        one JSON report per stage

Every item carries its provenance (source clip, parent, fold), and
:func:`training_items` refuses anything derived from a test-fold original.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import audio_io, codebook, forest, surf, wccgan
from .config import ConfigError, RunConfig, dump_config
from .scalogram import Spectrogram, dwt_power, hist_equalize, read_pgm, to_image, write_pgm

logger = logging.getLogger(__name__)

STAGES = ("augment1d", "spectrogram", "enhance", "gan-train", "gan-generate",
          "features", "codebook", "train", "evaluate")
DEPENDS = {
    "augment1d": (),
    "spectrogram": ("augment1d",),
    "enhance": ("spectrogram",),
    "gan-train": ("enhance",),
    "gan-generate": ("gan-train",),
    "features": ("enhance", "gan-generate"),
    "codebook": ("features",),
    "train": ("codebook",),
    "evaluate": ("train",),
}
# stages whose outputs do not depend on the run seed
SEEDLESS = {"augment1d", "spectrogram", "enhance", "features"}
N_FOLDS_MAX = 5


class PipelineError(Exception):
    exit_code = 1


class DataError(PipelineError):
    exit_code = 4


class ManifestError(DataError):
    pass


class DependencyError(PipelineError):
    exit_code = 3


class LeakageError(RuntimeError):
    """A training set contains something derived from a test-fold original."""


# -- manifests ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    fold: int
    split: str = "original"

    @property
    def source_id(self) -> str:
        return self.path.stem


@dataclass
class DatasetManifest:
    entries: list
    classes: tuple
    name: str = "custom"
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> dict:
        counts = dict.fromkeys(self.classes, 0)
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def folds(self) -> list:
        return sorted({e.fold for e in self.entries})


def load_manifest(path, classes: Sequence[str] = (), name: str = "custom",
                  check_paths: bool = True) -> DatasetManifest:
    """Parse a ``path,label,fold[,split]`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc})") from None
    rows = csv.reader(text.splitlines())
    header = next(rows, None)
    if header is None or [h.strip() for h in header[:3]] != ["path", "label", "fold"]:
        raise ManifestError(f"{path}:1: header must start with path,label,fold")
    has_split = len(header) > 3 and header[3].strip() == "split"
    declared = tuple(classes)
    entries, seen = [], {}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ManifestError(f"{path}:{lineno}: expected at least 3 fields, got {len(row)}")
        rel, label, fold_s = (c.strip() for c in row[:3])
        try:
            fold = int(fold_s)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: fold {fold_s!r} is not an integer") from None
        if not 1 <= fold <= N_FOLDS_MAX:
            raise ManifestError(f"{path}:{lineno}: fold {fold} outside 1..{N_FOLDS_MAX}")
        if not label:
            raise ManifestError(f"{path}:{lineno}: empty label")
        if declared and label not in declared:
            raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
        wav = Path(rel) if Path(rel).is_absolute() else (path.parent / rel)
        wav = wav.resolve()
        if wav in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {rel!r} (first on line {seen[wav]})")
        if check_paths and not wav.is_file():
            raise ManifestError(f"{path}:{lineno}: missing file {rel!r}")
        seen[wav] = lineno
        split = row[3].strip() if has_split and len(row) > 3 and row[3].strip() else "original"
        entries.append(ManifestEntry(wav, label, fold, split))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    ids = [e.source_id for e in entries]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0]
        raise ManifestError(f"{path}: file stem {dup!r} is not unique; stems identify clips")
    classes_out = declared or tuple(sorted({e.label for e in entries}))
    return DatasetManifest(entries, classes_out, name, path)


# -- items and provenance ---------------------------------------------------------------------------

ITEM_FIELDS = ["item_id", "kind", "source_id", "parent_id", "label", "fold", "path", "gan_fold", "factor"]


@dataclass(frozen=True)
class Item:
    item_id: str
    kind: str          # original | shifted | gan
    source_id: str     # manifest clip every derivative traces back to
    parent_id: str
    label: str
    fold: int          # fold of the source clip
    path: str          # relative to the run directory unless absolute
    gan_fold: int = 0  # outer fold whose training data produced a gan item
    factor: float = 1.0

    def with_path(self, path: str) -> "Item":
        return Item(self.item_id, self.kind, self.source_id, self.parent_id, self.label,
                    self.fold, path, self.gan_fold, self.factor)


def write_items(path: Path, items: Sequence[Item]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ITEM_FIELDS)
        for it in items:
            w.writerow([it.item_id, it.kind, it.source_id, it.parent_id, it.label, it.fold,
                        it.path, it.gan_fold, repr(float(it.factor))])


def read_items(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Item(r["item_id"], r["kind"], r["source_id"], r["parent_id"], r["label"], int(r["fold"]),
                 r["path"], int(r["gan_fold"]), float(r["factor"])) for r in rows]


def training_items(items: Sequence[Item], fold: int, include_gan: bool = True) -> list:
    """Everything usable to fit models for outer fold ``fold``; guarded against leakage."""
    out = [it for it in items if it.fold != fold and
           (it.kind != "gan" or (include_gan and it.gan_fold == fold))]
    check_no_leak(out, fold)
    return out


def test_items(items: Sequence[Item], fold: int) -> list:
    return [it for it in items if it.kind == "original" and it.fold == fold]


def check_no_leak(train: Sequence[Item], fold: int) -> None:
    bad = [it.item_id for it in train if it.fold == fold or (it.kind == "gan" and it.gan_fold != fold)]
    if bad:
        raise LeakageError(f"{len(bad)} training items derive from fold {fold} originals, e.g. {bad[0]}")


# -- metrics and tables -----------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # rows = true class, columns = predicted

    @property
    def rates(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def render(self) -> str:
        """Plain-text table of two-decimal rates with the diagonal in brackets."""
        width = max(6, *(len(c) for c in self.classes)) + 2
        lines = ["true\\pred".ljust(width) + "".join(c.rjust(width) for c in self.classes)]
        rates = self.rates
        for i, cls in enumerate(self.classes):
            cells = []
            for j in range(len(self.classes)):
                cell = f"{rates[i, j]:.2f}"
                cells.append((f"[{cell}]" if i == j else cell).rjust(width))
            lines.append(cls.ljust(width) + "".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["true,predicted,count,rate"]
        rates = self.rates
        for i, a in enumerate(self.classes):
            for j, b in enumerate(self.classes):
                lines.append(f"{a},{b},{int(self.counts[i, j])},{rates[i, j]:.6f}")
        return "\n".join(lines) + "\n"


def confusion(predictions: Sequence, labels: Sequence, classes: Sequence[str]) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(predictions, labels):
        if p not in index or t not in index:
            raise ValueError(f"label {p if p not in index else t!r} is not in the class order")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(classes), counts)


def accuracy(predictions, labels) -> float:
    p, t = np.asarray(predictions), np.asarray(labels)
    return float(np.mean(p == t)) if t.size else 0.0


def macro_f1(predictions, labels, classes: Sequence[str]) -> float:
    """Unweighted mean F1 over classes that occur in either sequence."""
    p, t = np.asarray(predictions), np.asarray(labels)
    scores = []
    for c in classes:
        tp = int(np.sum((p == c) & (t == c)))
        fp = int(np.sum((p == c) & (t != c)))
        fn = int(np.sum((p != c) & (t == c)))
        if tp + fp + fn:
            scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def avg_rank(table: dict) -> list:
    """Average rank per method (1 = best accuracy, ties averaged), best first.

    ``table`` maps method -> accuracies per dataset. Methods with a NaN cell
    are dropped with a warning.
    """
    rows = {}
    for method, accs in table.items():
        a = np.asarray(accs, dtype=np.float64)
        if np.any(np.isnan(a)):
            warnings.warn(f"{method}: missing accuracy, excluded from ranking", stacklevel=2)
            continue
        rows[method] = a
    if not rows:
        return []
    lengths = {a.size for a in rows.values()}
    if len(lengths) != 1:
        raise ValueError("every method needs one accuracy per dataset")
    methods = list(rows)
    acc = np.stack([rows[m] for m in methods])  # methods x datasets
    ranks = np.column_stack([rankdata(-acc[:, j], method="average") for j in range(acc.shape[1])])
    means = ranks.mean(axis=1)
    order = sorted(range(len(methods)), key=lambda i: (means[i], methods[i]))
    return [(methods[i], float(means[i])) for i in order]


# -- run directory bookkeeping ----------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


class ContentCache:
    """Content-addressed store so identical inputs are never processed twice."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def fetch(self, key: str, dest: Path, compute: Callable[[Path], None]) -> bool:
        """Copy the cached blob for ``key`` to ``dest``, computing it first on a miss."""
        blob = self.root / key[:2] / key
        dest.parent.mkdir(parents=True, exist_ok=True)
        if blob.exists():
            shutil.copyfile(blob, dest)
            return True
        compute(dest)
        blob.parent.mkdir(parents=True, exist_ok=True)
        tmp = blob.with_suffix(".tmp")
        shutil.copyfile(dest, tmp)
        tmp.replace(blob)
        return False


@dataclass
class Workspace:
    out: Path
    cfg: RunConfig
    manifest: DatasetManifest
    cache: Optional[ContentCache] = None

    def __post_init__(self):
        self.out = Path(self.out)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def state_file(self, stage: str) -> Path:
        return self.out / "state" / f"{stage}.json"

    def index(self, name: str) -> list:
        return read_items(self.out / "index" / f"{name}.csv")


@dataclass
class StageResult:
    counts: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _manifest_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(f"{e.source_id},{e.label},{e.fold},{e.split},".encode())
        h.update(_sha256_file(e.path).encode())
    return h.hexdigest()


def _stage_key(ws: Workspace, stage: str, sections: Sequence[str]) -> str:
    deps = {}
    for dep in DEPENDS[stage]:
        sf = ws.state_file(dep)
        if not sf.exists():
            raise DependencyError(f"stage {stage!r} needs {dep!r}: run stage {dep} first")
        deps[dep] = json.loads(sf.read_text())["digest"]
    payload = {
        "stage": stage,
        "config": ws.cfg.section_dict(*sections),
        "deps": deps,
        "seed": None if stage in SEEDLESS else ws.cfg.seed,
    }
    if stage == "augment1d":
        payload["manifest"] = _manifest_digest(ws.manifest)
        payload["classes"] = list(ws.manifest.classes)
    return _sha256_text(json.dumps(payload, sort_keys=True))


def _outputs_intact(ws: Workspace, state: dict) -> bool:
    for rel, digest in state["outputs"].items():
        p = ws.out / rel
        if not p.exists() or _sha256_file(p) != digest:
            return False
    return True


# -- per-image work ---------------------------------------------------------------------------------

def _surf_params(cfg: RunConfig) -> dict:
    return dict(threshold=cfg.surf.threshold, nms=cfg.surf.nms, octaves=cfg.surf.octaves)


def _features_for(ws: Workspace, image: Path, dest: Path) -> None:
    """SURF dump for one PGM, skipped when ``dest`` already holds it.

    A ``.key`` sidecar records which image content and detector settings a
    dump was made from, so stale dumps are never reused.
    """
    key = _sha256_text(json.dumps({"surf": _surf_params(ws.cfg), "image": _sha256_file(image)}))
    sidecar = dest.with_suffix(".key")
    if dest.exists() and sidecar.exists() and sidecar.read_text() == key:
        return

    def compute(target: Path) -> None:
        descs = surf.extract_all(read_pgm(image), **_surf_params(ws.cfg))
        surf.write_descriptors(target, descs)

    dest.parent.mkdir(parents=True, exist_ok=True)
    if ws.cache is None:
        compute(dest)
    else:
        ws.cache.fetch(key, dest, compute)
    sidecar.write_text(key)


def _feature_rel(item: Item) -> str:
    if item.kind == "gan":
        return f"features/gan/fold{item.gan_fold}/{Path(item.path).stem}.surf"
    return f"features/{item.item_id}.surf"


def ensure_features(ws: Workspace, items: Sequence[Item]) -> list:
    """Feature items for ``items``, extracting any dump not yet on disk."""
    out = []
    for it in items:
        rel = _feature_rel(it)
        _features_for(ws, ws.path(it.path), ws.out / rel)
        out.append(it.with_path(rel))
    return out


def load_descriptors(ws: Workspace, items: Sequence[Item]) -> list:
    return [surf.descriptor_matrix(surf.read_descriptors(ws.path(it.path))) for it in items]


# -- models per fold --------------------------------------------------------------------------------

def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def fit_codebook(descs: Sequence[np.ndarray], cfg: RunConfig, seed: int) -> codebook.Codebook:
    X = np.vstack([d for d in descs if len(d)]) if any(len(d) for d in descs) else np.zeros((0, surf.DESCRIPTOR_DIM))
    distinct = np.unique(X, axis=0).shape[0] if len(X) else 0
    if distinct == 0:
        raise DataError("no descriptors in the training set; lower surf.threshold")
    k = min(cfg.codebook.k, distinct)
    if k < cfg.codebook.k:
        logger.warning("only %d distinct descriptors; codebook K reduced from %d", distinct, cfg.codebook.k)
    return codebook.fit(X, k, max_iters=cfg.codebook.max_iters, seed=seed)


def encode_all(descs: Sequence[np.ndarray], V: np.ndarray) -> np.ndarray:
    return np.array([codebook.encode(d, V).values for d in descs]).reshape(len(descs), V.shape[1])


def fit_forest(codes: np.ndarray, labels: Sequence[str], cfg: RunConfig, seed: int,
               n_trees: Optional[int] = None, groups: Optional[np.ndarray] = None) -> tuple:
    """Forest over code vectors; with ``forest.tree_grid`` set the size is chosen by grouped CV."""
    labels = np.asarray(labels)
    chosen = n_trees or cfg.forest.n_trees
    scores = {}
    if n_trees is None and cfg.forest.tree_grid and groups is not None and len(np.unique(groups)) > 1:
        chosen, scores = forest.select_n_trees(codes, labels, list(cfg.forest.tree_grid), groups,
                                               cfg.forest_params(seed=seed))
    return forest.fit(codes, labels, cfg.forest_params(n_trees=chosen, seed=seed)), chosen, scores


def crossval_predict(descs: Sequence[np.ndarray], labels: Sequence[str], folds: Sequence[int],
                     cfg: RunConfig, seed: int, n_trees: Optional[int] = None) -> np.ndarray:
    """Out-of-fold predictions of the codebook + forest model (no augmentation)."""
    labels = np.asarray(labels)
    folds = np.asarray(folds)
    pred = np.empty(len(labels), dtype=labels.dtype)
    for k in np.unique(folds):
        tr, te = np.nonzero(folds != k)[0], np.nonzero(folds == k)[0]
        cb = fit_codebook([descs[i] for i in tr], cfg, _sub_seed(seed, k, 1))
        rf, _, _ = fit_forest(encode_all([descs[i] for i in tr], cb.V), labels[tr], cfg,
                              _sub_seed(seed, k, 2), n_trees=n_trees)
        pred[te] = rf.predict(encode_all([descs[i] for i in te], cb.V))
    return pred


# -- stages -----------------------------------------------------------------------------------------

def _stage_augment1d(ws: Workspace) -> StageResult:
    cfg, res = ws.cfg, StageResult()
    items, failures = [], []
    for e in ws.manifest.entries:
        try:
            clip = audio_io.load_wav(e.path, label=e.label, source_id=e.source_id)
        except audio_io.AudioError as exc:
            raise DataError(f"{e.path}: {exc}") from exc
        items.append(Item(clip.clip_id, "original", e.source_id, e.source_id, e.label, e.fold, str(e.path)))
        if not cfg.augment.enabled:
            continue
        for f in cfg.augment.pitch_factors:
            try:
                shifted = audio_io.pitch_shift(clip, f)
            except Exception as exc:  # noqa: BLE001 - reported per clip
                failures.append({"clip": e.source_id, "factor": f, "error": str(exc)})
                continue
            rel = f"audio1d/{shifted.clip_id}.wav"
            (ws.out / "audio1d").mkdir(parents=True, exist_ok=True)
            audio_io.save_wav(ws.out / rel, shifted)
            items.append(Item(shifted.clip_id, "shifted", e.source_id, clip.clip_id, e.label, e.fold, rel,
                              factor=float(f)))
            res.outputs.append(rel)
    write_items(ws.out / "index" / "audio.csv", items)
    res.outputs.append("index/audio.csv")
    res.counts = {"originals": len(ws.manifest), "crafted": len(items) - len(ws.manifest),
                  "failures": len(failures), "total": len(items)}
    res.extra = {"failures": failures, "class_counts": ws.manifest.class_counts()}
    return res


def _stage_spectrogram(ws: Workspace) -> StageResult:
    scfg = ws.cfg.scalogram_config()
    res = StageResult()
    out_items = []
    for it in ws.index("audio"):
        rel = f"spectrograms/raw/{it.item_id}.pgm"
        src = ws.path(it.path)

        def compute(target: Path, src=src, it=it) -> None:
            clip = audio_io.load_wav(src, label=it.label, source_id=it.source_id)
            write_pgm(target, to_image(dwt_power(clip, scfg), scfg, it.item_id, it.label))

        dest = ws.out / rel
        try:
            if ws.cache is None:
                dest.parent.mkdir(parents=True, exist_ok=True)
                compute(dest)
            else:
                key = _sha256_text(json.dumps({"scalogram": ws.cfg.section_dict("scalogram"),
                                               "wav": _sha256_file(src)}, sort_keys=True))
                ws.cache.fetch(key, dest, compute)
        except (audio_io.AudioError, ValueError) as exc:
            raise DataError(f"{src}: {exc}") from exc
        out_items.append(it.with_path(rel))
        res.outputs.append(rel)
    write_items(ws.out / "index" / "raw.csv", out_items)
    res.outputs.append("index/raw.csv")
    res.counts = {"spectrograms": len(out_items)}
    return res


def _stage_enhance(ws: Workspace) -> StageResult:
    res = StageResult()
    out_items = []
    for it in ws.index("raw"):
        rel = f"spectrograms/enhanced/{it.item_id}.pgm"
        (ws.out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_pgm(ws.out / rel, hist_equalize(Spectrogram(read_pgm(ws.path(it.path)))))
        out_items.append(it.with_path(rel))
        res.outputs.append(rel)
    write_items(ws.out / "index" / "enhanced.csv", out_items)
    res.outputs.append("index/enhanced.csv")
    res.counts = {"enhanced": len(out_items)}
    return res


def _gan_sources(items: Sequence[Item], cfg: RunConfig) -> list:
    return [it for it in items if it.kind == "original" or (cfg.gan.include_shifted and it.kind == "shifted")]


def _stage_gan_train(ws: Workspace) -> StageResult:
    cfg, res = ws.cfg, StageResult()
    classes = list(ws.manifest.classes)
    enhanced = ws.index("enhanced")
    folds = sorted({it.fold for it in enhanced})[:cfg.evaluation.folds]
    res.counts = {"folds": 0, "pairs": 0, "epochs": 0}
    if not cfg.gan.enabled:
        res.extra["disabled"] = True
        return res
    for k in folds:
        fdir = f"gan/fold{k}"
        (ws.out / fdir).mkdir(parents=True, exist_ok=True)
        train = training_items(_gan_sources(enhanced, cfg), k, include_gan=False)
        originals = [it for it in train if it.kind == "original"]
        # pair selection from the out-of-fold confusion of an unaugmented model
        feats = ensure_features(ws, originals)
        descs = load_descriptors(ws, feats)
        labels = [it.label for it in originals]
        inner_folds = [it.fold for it in originals]
        pred = crossval_predict(descs, labels, inner_folds, cfg, _sub_seed(cfg.seed, k, 3),
                                n_trees=cfg.gan.confusion_trees)
        cm = confusion(list(pred), labels, classes)
        rates = cm.rates
        empty = rates.sum(axis=1) == 0
        rates[empty, np.nonzero(empty)[0]] = 1.0  # classes absent from training pair only with themselves
        by_class = {c: [it for it in train if it.label == c] for c in classes}
        plan = wccgan.select_pairs(rates, classes, [len(by_class[c]) for c in classes],
                                   seed=_sub_seed(cfg.seed, k, 4))
        pairs_doc = {"fold": k, "confusion": cm.counts.tolist(), "classes": classes, "pairs": []}
        for i, pair in enumerate(plan.pairs):
            src = by_class[pair.source]
            tgt = by_class[pair.target]
            if pair.mode == "intra":
                src = [src[j] for j in pair.source_idx]
                tgt = [tgt[j] for j in pair.target_idx]
            generate_from = [t.item_id for t in src]
            cap = cfg.gan.max_pair_samples
            if cap:
                rng = np.random.default_rng(_sub_seed(cfg.seed, k, 9, i))
                src = [src[j] for j in np.sort(rng.permutation(len(src))[:cap])]
                tgt = [tgt[j] for j in np.sort(rng.permutation(len(tgt))[:cap])]
            if len(src) < 2 or len(tgt) < 2:
                logger.warning("fold %d pair %s skipped: too few samples", k, pair.key)
                continue
            hyper = cfg.gan_hyper(seed=_sub_seed(cfg.seed, k, 5, i))
            load = lambda its: wccgan.to_net_input(np.stack([read_pgm(ws.path(t.path)) for t in its]),
                                                   hyper.net_shape, np.dtype(hyper.dtype))
            result = wccgan.train_pair(load(src), load(tgt), hyper, snapshot_dir=ws.out / fdir)
            ckpt = f"{fdir}/{pair.key}.wccg"
            result.model.save(ws.out / ckpt)
            hist = f"{fdir}/{pair.key}.history.csv"
            result.write_history(ws.out / hist)
            res.outputs += [ckpt, hist]
            res.counts["pairs"] += 1
            res.counts["epochs"] += len(result.history)
            pairs_doc["pairs"].append({
                "key": pair.key, "source": pair.source, "target": pair.target, "mode": pair.mode,
                "sources": [t.item_id for t in src], "targets": [t.item_id for t in tgt],
                "generate_from": generate_from,
                "checkpoint": ckpt, "seed": hyper.seed, "epochs": len(result.history),
                "stopped_early": result.stopped_early,
                "final_cycle": result.history[-1]["cycle"], "final_val_f1": result.history[-1]["val_f1"],
            })
        _write_text(ws.out / fdir / "pairs.json", _dumps(pairs_doc))
        res.outputs.append(f"{fdir}/pairs.json")
        res.counts["folds"] += 1
    return res


def gan_image_name(parent_id: str, source: str, target: str, n: int) -> str:
    return f"{parent_id}__gan_{source}_to_{target}_{n}.pgm"


def _stage_gan_generate(ws: Workspace) -> StageResult:
    cfg, res = ws.cfg, StageResult()
    items = []
    res.counts = {"generated": 0}
    if cfg.gan.enabled:
        enhanced = {it.item_id: it for it in ws.index("enhanced")}
        n_train_originals = {}
        for pairs_file in sorted((ws.out / "gan").glob("fold*/pairs.json"), key=lambda p: int(p.parent.name[4:])):
            doc = json.loads(pairs_file.read_text())
            k = doc["fold"]
            n_train_originals[k] = sum(1 for it in enhanced.values() if it.kind == "original" and it.fold != k)
            total = cfg.gan.n_generated or int(round(cfg.gan.generated_fraction * n_train_originals[k]))
            counts = wccgan.allocate(total, len(doc["pairs"]))
            rng = np.random.default_rng(_sub_seed(cfg.seed, k, 6))
            hyper = cfg.gan_hyper()
            for pair, count in zip(doc["pairs"], counts):
                model = wccgan.WCCGAN.load(ws.out / pair["checkpoint"], hyper)
                pool = pair["generate_from"]
                order = rng.permutation(len(pool))
                for n in range(count):
                    parent = enhanced[pool[order[n % len(order)]]]
                    img = Spectrogram(read_pgm(ws.path(parent.path)), clip_id=parent.item_id, label=parent.label)
                    out = wccgan.generate(model.f_st, img, hyper.net_shape, label=pair["target"])
                    if cfg.gan.enhance_generated:
                        out = hist_equalize(out)
                    name = gan_image_name(parent.item_id, pair["source"], pair["target"], n)
                    rel = f"gan/fold{k}/images/{name}"
                    (ws.out / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_pgm(ws.out / rel, out)
                    items.append(Item(f"fold{k}/{name[:-4]}", "gan", parent.source_id, parent.item_id,
                                      pair["target"], parent.fold, rel, gan_fold=k))
                    res.outputs.append(rel)
        for it in items:
            if it.fold == it.gan_fold:
                raise LeakageError(f"{it.item_id} was generated from a fold {it.gan_fold} test clip")
        res.counts["generated"] = len(items)
    else:
        res.extra["disabled"] = True
    write_items(ws.out / "index" / "gan.csv", items)
    res.outputs.append("index/gan.csv")
    return res


def _stage_features(ws: Workspace) -> StageResult:
    res = StageResult()
    items = ws.index("enhanced") + ws.index("gan")
    feats = ensure_features(ws, items)
    n_desc = 0
    for it in feats:
        n_desc += len(surf.read_descriptors(ws.path(it.path)))
        res.outputs.append(it.path)
    write_items(ws.out / "index" / "features.csv", feats)
    res.outputs.append("index/features.csv")
    res.counts = {"images": len(feats), "descriptors": n_desc,
                  "empty": sum(1 for it in feats if (ws.out / it.path).stat().st_size <= 12)}
    return res


def _folds(ws: Workspace, items: Sequence[Item]) -> list:
    return sorted({it.fold for it in items if it.kind == "original"})[:ws.cfg.evaluation.folds]


def _stage_codebook(ws: Workspace) -> StageResult:
    cfg, res = ws.cfg, StageResult()
    feats = ws.index("features")
    res.extra["iterations"] = {}
    for k in _folds(ws, feats):
        train = training_items(feats, k, include_gan=cfg.gan.enabled)
        cb = fit_codebook(load_descriptors(ws, train), cfg, _sub_seed(cfg.seed, k, 7))
        rel = f"models/fold{k}.skmc"
        (ws.out / "models").mkdir(parents=True, exist_ok=True)
        codebook.save_codebook(ws.out / rel, cb)
        res.outputs.append(rel)
        res.extra["iterations"][str(k)] = cb.iterations
    res.counts = {"codebooks": len(res.outputs)}
    return res


def _stage_train(ws: Workspace) -> StageResult:
    cfg, res = ws.cfg, StageResult()
    feats = ws.index("features")
    res.extra["n_trees"] = {}
    for k in _folds(ws, feats):
        train = training_items(feats, k, include_gan=cfg.gan.enabled)
        cb = codebook.load_codebook(ws.out / f"models/fold{k}.skmc")
        codes = encode_all(load_descriptors(ws, train), cb.V)
        groups = np.array([it.fold for it in train])
        rf, n_trees, scores = fit_forest(codes, [it.label for it in train], cfg, _sub_seed(cfg.seed, k, 8),
                                         groups=groups)
        rel = f"models/fold{k}.rfst"
        forest.save_forest(ws.out / rel, rf)
        res.outputs.append(rel)
        res.extra["n_trees"][str(k)] = n_trees
        if scores:
            res.extra.setdefault("auc", {})[str(k)] = {str(n): s for n, s in scores.items()}
    res.counts = {"forests": len(res.outputs)}
    return res


def _stage_evaluate(ws: Workspace) -> StageResult:
    res = StageResult()
    classes = list(ws.manifest.classes)
    feats = ws.index("features")
    per_fold, all_pred, all_true, rows = [], [], [], []
    for k in _folds(ws, feats):
        test = test_items(feats, k)
        cb = codebook.load_codebook(ws.out / f"models/fold{k}.skmc")
        rf = forest.load_forest(ws.out / f"models/fold{k}.rfst")
        pred = list(rf.predict(encode_all(load_descriptors(ws, test), cb.V)))
        truth = [it.label for it in test]
        partial = sorted(set(classes) - set(truth))
        if partial:
            warnings.warn(f"fold {k} has no test samples of {partial}; metrics are partial", stacklevel=2)
        per_fold.append({"fold": k, "n_test": len(test), "accuracy": accuracy(pred, truth),
                         "macro_f1": macro_f1(pred, truth, classes), "partial": bool(partial)})
        all_pred += pred
        all_true += truth
        rows += [(it.item_id, k, t, p) for it, t, p in zip(test, truth, pred)]
    cm = confusion(all_pred, all_true, classes)
    metrics = {
        "dataset": ws.cfg.dataset.name, "seed": ws.cfg.seed, "gan": ws.cfg.gan.enabled,
        "per_fold": per_fold,
        "mean_accuracy": float(np.mean([f["accuracy"] for f in per_fold])),
        "mean_macro_f1": float(np.mean([f["macro_f1"] for f in per_fold])),
        "classes": classes, "confusion_counts": cm.counts.tolist(),
    }
    _write_text(ws.out / "metrics/metrics.json", _dumps(metrics))
    _write_text(ws.out / "metrics/confusion.txt", cm.render())
    _write_text(ws.out / "metrics/confusion.csv", cm.to_csv())
    lines = ["item_id,fold,true,predicted"] + [f"{a},{b},{c},{d}" for a, b, c, d in rows]
    _write_text(ws.out / "metrics/predictions.csv", "\n".join(lines) + "\n")
    lines = ["fold,n_test,accuracy,macro_f1,partial"] + [
        f"{f['fold']},{f['n_test']},{f['accuracy']:.6f},{f['macro_f1']:.6f},{int(f['partial'])}" for f in per_fold]
    _write_text(ws.out / "metrics/per_fold.csv", "\n".join(lines) + "\n")
    res.outputs = ["metrics/metrics.json", "metrics/confusion.txt", "metrics/confusion.csv",
                   "metrics/predictions.csv", "metrics/per_fold.csv"]
    res.counts = {"evaluated": cm.n, "folds": len(per_fold)}
    res.extra = {"mean_accuracy": metrics["mean_accuracy"], "mean_macro_f1": metrics["mean_macro_f1"]}
    return res


_STAGE_FUNCS = {
    "augment1d": (_stage_augment1d, ("dataset", "augment")),
    "spectrogram": (_stage_spectrogram, ("scalogram",)),
    "enhance": (_stage_enhance, ()),
    "gan-train": (_stage_gan_train, ("gan", "surf", "codebook", "forest", "evaluation")),
    "gan-generate": (_stage_gan_generate, ("gan",)),
    "features": (_stage_features, ("surf",)),
    "codebook": (_stage_codebook, ("codebook", "gan", "evaluation")),
    "train": (_stage_train, ("forest", "gan", "evaluation")),
    "evaluate": (_stage_evaluate, ("dataset",)),
}


def run_stage(stage: str, cfg: RunConfig, out, manifest: Optional[DatasetManifest] = None,
              cache_dir=None) -> dict:
    """Run one stage (or ``all``) in run directory ``out``; returns its report.

    A stage whose inputs, configuration and outputs are unchanged since its
    last run is skipped and reported as a cache hit.
    """
    if stage != "all" and stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('all',))}")
    if manifest is None:
        if not cfg.dataset.manifest:
            raise ConfigError("no manifest: set dataset.manifest in the config")
        manifest = load_manifest(cfg.dataset.manifest, cfg.dataset.classes, cfg.dataset.name)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ws = Workspace(out, cfg, manifest, ContentCache(cache_dir) if cache_dir else None)
    _write_text(out / "config.ini", dump_config(cfg))
    if stage == "all":
        t0 = time.perf_counter()
        reports = [run_stage(s, cfg, out, manifest, cache_dir) for s in STAGES]
        report = {"stage": "all", "seed": cfg.seed, "profile": cfg.profile,
                  "stages": {r["stage"]: {"cache_hit": r["cache_hit"], "counts": r["counts"]} for r in reports},
                  "cache_hit": all(r["cache_hit"] for r in reports),
                  "timings": {"elapsed_s": round(time.perf_counter() - t0, 3)}}
        _write_text(out / "reports" / "all.json", _dumps(report))
        return report

    func, sections = _STAGE_FUNCS[stage]
    key = _stage_key(ws, stage, sections)
    sf = ws.state_file(stage)
    t0 = time.perf_counter()
    if sf.exists():
        state = json.loads(sf.read_text())
        if state["key"] == key and _outputs_intact(ws, state):
            report = json.loads((out / "reports" / f"{stage}.json").read_text())
            report.update(cache_hit=True, timings={"elapsed_s": round(time.perf_counter() - t0, 3)})
            _write_text(out / "reports" / f"{stage}.json", _dumps(report))
            return report
    # invalidate this stage and everything downstream before recomputing
    for s in STAGES[STAGES.index(stage):]:
        ws.state_file(s).unlink(missing_ok=True)
    result = func(ws)
    outputs = {rel: _sha256_file(out / rel) for rel in sorted(set(result.outputs))}
    digest = _sha256_text(json.dumps({"key": key, "outputs": outputs}, sort_keys=True))
    _write_text(sf, _dumps({"stage": stage, "key": key, "digest": digest, "outputs": outputs}))
    report = {"stage": stage, "seed": cfg.seed, "profile": cfg.profile, "cache_hit": False,
              "counts": result.counts, **result.extra,
              "timings": {"elapsed_s": round(time.perf_counter() - t0, 3)}}
    _write_text(out / "reports" / f"{stage}.json", _dumps(report))
    logger.info("%s: %s", stage, result.counts)
    return report


def kfold_eval(manifest: DatasetManifest, cfg: RunConfig, k: int = 5, out=None, cache_dir=None) -> dict:
    """Run every stage with ``k`` folds and return the metrics document."""
    import tempfile

    cfg = cfg.with_updates(evaluation={"folds": k})
    missing = sorted(set(range(1, k + 1)) - set(manifest.folds()))
    if missing:
        raise DataError(f"manifest lacks folds {missing}")
    if out is None:
        with tempfile.TemporaryDirectory() as tmp:
            run_stage("all", cfg, tmp, manifest, cache_dir)
            return json.loads((Path(tmp) / "metrics/metrics.json").read_text())
    run_stage("all", cfg, out, manifest, cache_dir)
    return json.loads((Path(out) / "metrics/metrics.json").read_text())
