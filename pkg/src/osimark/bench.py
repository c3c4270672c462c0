"""Experiment harness: embedding, extraction, and the evaluation grid.

Every stochastic stage of item ``i`` is seeded with ``base_seed + i`` (plus the
distortion's own seed), so results do not depend on batching or worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import chanstats, distort, osinet, toypipe
from .cipher import WatermarkKey, decrypt_mask, decrypt_probs, encrypt_mask, keystream
from .distort import DistortionSpec, Kind
from .latentlab import extract_signs, inject_signs, item_seed, load_latent, make_rng, sample_gaussian, save_latent
from .toypipe import PipelineConfig
from .wmcodec import LatentShape, majority_decode, pack_bits, random_watermark, repeat_expand, soft_decode, unpack_bits

CSV_COLUMNS = ["method", "f_hw", "distortion", "acc", "tpr", "tau", "payload_rate", "log2_users",
               "fpr", "log_auc", "seconds_per_extraction", "n_images"]
CLEAN = DistortionSpec(Kind.IDENTITY)
ADV = "Adv."


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str  # "multistep" | "osi" | "frozen"
    steps: int = 50
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in ("multistep", "osi", "frozen"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "multistep" and self.steps < 1:
            raise ValueError("multistep extractor needs steps >= 1")
        if self.kind == "osi" and not self.checkpoint:
            raise ValueError("osi extractor needs a checkpoint path")

    @property
    def id(self) -> str:
        return f"multistep-{self.steps}" if self.kind == "multistep" else self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "multistep":
            d["steps"] = self.steps
        if self.kind == "osi":
            d["checkpoint"] = self.checkpoint
        return d


@dataclass
class ExperimentConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    key: str = "key.bin"
    f_hw: int = 1
    n_images: int = 100
    distortion_suite: list = field(default_factory=distort.default_suite)
    extractors: list = field(default_factory=lambda: [ExtractorSpec("multistep", 50)])
    fpr_targets: list = field(default_factory=lambda: [1e-6])
    base_seed: int = 0
    data_dir: str = "data"
    workers: int = 1
    train: osinet.TrainConfig = field(default_factory=osinet.TrainConfig)
    n_train: int = 10000
    watermark: str | None = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not self.fpr_targets:
            raise ValueError("need at least one fpr target")
        self.pipeline = self.pipeline.replace(shape=self.pipeline.shape.with_factor(self.f_hw))

    @property
    def shape(self) -> LatentShape:
        return self.pipeline.shape

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        pipe = self.pipeline.to_dict()
        pipe.pop("f_hw")
        return {
            "pipeline": pipe,
            "key": self.key,
            "f_hw": self.f_hw,
            "n_images": self.n_images,
            "distortion_suite": [s.to_dict() for s in self.distortion_suite],
            "extractors": [e.to_dict() for e in self.extractors],
            "fpr_targets": list(self.fpr_targets),
            "base_seed": self.base_seed,
            "data_dir": self.data_dir,
            "workers": self.workers,
            "train": self.train.to_dict(),
            "n_train": self.n_train,
            "watermark": self.watermark,
        }

    @classmethod
    def from_dict(cls, d: dict, root=".") -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__) - {"root"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "pipeline" in d:
            d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        suite = d.get("distortion_suite", "default")
        if suite == "default":
            d["distortion_suite"] = distort.default_suite()
        else:
            d["distortion_suite"] = [DistortionSpec.from_dict(s) for s in suite]
        if "extractors" in d:
            d["extractors"] = [ExtractorSpec(**e) for e in d["extractors"]]
        if "train" in d:
            d["train"] = osinet.TrainConfig.from_dict(d["train"])
        return cls(root=Path(root), **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def parallel_map(fn, items, workers: int = 1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, size: int):
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


# ---------------------------------------------------------------- embedding

@dataclass
class Embedded:
    watermarks: np.ndarray  # (N, k) uint8
    zT: np.ndarray
    z0: np.ndarray
    images: np.ndarray
    seeds: list


def watermark_for(shape: LatentShape, seed: int) -> np.ndarray:
    return random_watermark(shape, make_rng(seed, stream=3))


def watermarked_latent(wm, key: WatermarkKey, shape: LatentShape, seed: int) -> np.ndarray:
    """Watermark bits -> repeated grid -> encrypted sign mask -> signs of a fresh Gaussian."""
    mask = encrypt_mask(repeat_expand(wm, shape), keystream(key, shape.n))
    return inject_signs(sample_gaussian(shape, seed), mask)


def embed_batch(cfg: PipelineConfig, key: WatermarkKey, seeds, watermarks=None) -> Embedded:
    shape = cfg.shape
    seeds = [int(s) for s in seeds]
    if watermarks is None:
        wms = np.stack([watermark_for(shape, s) for s in seeds])
    else:
        wms = np.asarray(watermarks, dtype=np.uint8)
        if wms.ndim == 1:
            wms = np.broadcast_to(wms, (len(seeds), wms.size)).copy()
        if wms.shape != (len(seeds), shape.k):
            raise ValueError(f"watermarks must be {shape.k} bits per image")
    zT = np.stack([watermarked_latent(w, key, shape, s) for w, s in zip(wms, seeds)])
    z0, images = toypipe.generate(zT, cfg)
    return Embedded(wms, zT, z0, images, seeds)


# --------------------------------------------------------------- extraction

@dataclass
class Extraction:
    mask: np.ndarray                 # (N, c, h, w) ±1
    probs: np.ndarray | None = None  # sign probabilities (osi only)
    path: list | None = None         # multistep iterates, step 0 = encoder output


def extract_batch(images, ext: ExtractorSpec, cfg: PipelineConfig, model=None,
                  keep_path: bool = False, z0=None) -> Extraction:
    if ext.kind == "frozen":
        start = toypipe.encode(images, cfg) if z0 is None else z0
        return Extraction(extract_signs(start))
    if ext.kind == "multistep":
        if keep_path:
            zT, path = toypipe.invert_multistep(images, cfg, ext.steps, z0=z0, return_path=True)
            return Extraction(extract_signs(zT), path=path)
        return Extraction(extract_signs(toypipe.invert_multistep(images, cfg, ext.steps, z0=z0)))
    if model is None:
        raise ValueError("osi extraction needs a model")
    probs, _ = osinet.predict(model, images, cfg)
    return Extraction(osinet.mask_from_probs(probs), probs=probs)


def decode_watermarks(ex: Extraction, key: WatermarkKey, shape: LatentShape, soft: bool | None = None):
    ks = keystream(key, shape.n)
    if soft is None:
        soft = ex.probs is not None
    if soft:
        return soft_decode(decrypt_probs(ex.probs, ks), shape)
    return majority_decode(decrypt_mask(ex.mask, ks), shape)


def accuracies(wms, ex: Extraction, key: WatermarkKey, shape: LatentShape) -> np.ndarray:
    return np.atleast_1d(chanstats.bit_accuracy(wms, decode_watermarks(ex, key, shape)))


def path_accuracies(wms, path, key: WatermarkKey, shape: LatentShape) -> np.ndarray:
    """Mean bit accuracy after each inversion step (entry 0 is the raw encoder output)."""
    return np.array([
        float(np.mean(accuracies(wms, Extraction(extract_signs(z)), key, shape))) for z in path
    ])


# --------------------------------------------------------------- evaluation

@dataclass
class CellResult:
    method: str
    distortion: str
    accs: np.ndarray
    seconds_per_extraction: float
    step_curve: np.ndarray | None = None


def evaluate_cell(images, wms, ext, spec: DistortionSpec, cfg: PipelineConfig, key, *,
                  model=None, base_seed=0, workers=1, chunk=64, keep_path=False) -> CellResult:
    n = len(images)
    spec = spec.with_seed(item_seed(spec.seed, base_seed))

    def run(bounds):
        lo, hi = bounds
        distorted = distort.apply_batch(images[lo:hi], spec, base_index=lo)
        t0 = time.perf_counter()
        ex = extract_batch(distorted, ext, cfg, model, keep_path=keep_path)
        elapsed = time.perf_counter() - t0
        accs = accuracies(wms[lo:hi], ex, key, cfg.shape)
        curve = None
        if keep_path and ex.path is not None:
            curve = path_accuracies(wms[lo:hi], ex.path, key, cfg.shape) * (hi - lo)
        return accs, elapsed, curve

    parts = parallel_map(run, chunks(n, chunk), workers)
    accs = np.concatenate([p[0] for p in parts])
    seconds = sum(p[1] for p in parts) / n
    curve = None
    if keep_path and parts[0][2] is not None:
        curve = sum(p[2] for p in parts) / n
    return CellResult(ext.id, spec.name, accs, seconds, curve)


def result_rows(cell: CellResult, shape: LatentShape, fpr_targets) -> list[dict]:
    rows = []
    mean_acc = float(np.mean(cell.accs))
    rates = chanstats.bsc_rates(mean_acc, shape)
    lauc = chanstats.log_auc(cell.accs, shape.k)
    for fpr in fpr_targets:
        tau, _ = chanstats.threshold_for_fpr(shape.k, fpr)
        rows.append({
            "method": cell.method, "f_hw": shape.f_hw, "distortion": cell.distortion,
            "acc": mean_acc, "tpr": chanstats.tpr_at_fpr(cell.accs, shape.k, fpr), "tau": tau,
            "payload_rate": rates.payload_rate, "log2_users": rates.log2_users, "fpr": fpr,
            "log_auc": lauc, "seconds_per_extraction": cell.seconds_per_extraction,
            "n_images": int(len(cell.accs)),
        })
    return rows


def adv_rows(rows: list[dict], suite_names, shape: LatentShape) -> list[dict]:
    """Unweighted mean over the adversarial rows, per (method, fpr)."""
    out = []
    keys = sorted({(r["method"], r["fpr"]) for r in rows}, key=lambda x: (x[0], x[1]))
    for method, fpr in keys:
        sel = [r for r in rows if r["method"] == method and r["fpr"] == fpr and r["distortion"] in suite_names]
        if not sel:
            continue
        acc = float(np.mean([r["acc"] for r in sel]))
        rates = chanstats.bsc_rates(acc, shape)
        out.append({
            "method": method, "f_hw": shape.f_hw, "distortion": ADV, "acc": acc,
            "tpr": float(np.mean([r["tpr"] for r in sel])), "tau": sel[0]["tau"],
            "payload_rate": rates.payload_rate, "log2_users": rates.log2_users, "fpr": fpr,
            "log_auc": float(np.mean([r["log_auc"] for r in sel])),
            "seconds_per_extraction": float(np.mean([r["seconds_per_extraction"] for r in sel])),
            "n_images": sel[0]["n_images"],
        })
    return out


def format_row(row: dict) -> dict:
    return {k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()}


class RowSink:
    """Ordered CSV writer that flushes every row, so partial results survive failures."""

    def __init__(self, path: Path | None):
        self.rows: list[dict] = []
        self._fh = open(path, "w", newline="") if path else None
        self._writer = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS) if self._fh else None
        if self._writer:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, rows):
        for row in rows:
            self.rows.append(row)
            if self._writer:
                self._writer.writerow(format_row(row))
        if self._fh:
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow(format_row(r))
    return buf.getvalue()


# ------------------------------------------------------------ persistence

MANIFEST = "manifest.json"
IMAGES = "images.npy"


def key_digest(key: WatermarkKey) -> str:
    return hashlib.sha256(key.to_bytes()).hexdigest()


def write_embedding(out_dir, exp: ExperimentConfig, key: WatermarkKey, emb: Embedded) -> Path:
    out = Path(out_dir)
    (out / "latents").mkdir(parents=True, exist_ok=True)
    np.save(out / IMAGES, emb.images.astype(np.float32))
    items = []
    for i, seed in enumerate(emb.seeds):
        z0_ref, zT_ref = f"latents/z0_{i:06d}.lat", f"latents/zT_{i:06d}.lat"
        save_latent(out / z0_ref, emb.z0[i])
        save_latent(out / zT_ref, emb.zT[i])
        items.append({"index": i, "seed": seed, "watermark": pack_bits(emb.watermarks[i]).hex(),
                      "z0": z0_ref, "zT": zT_ref})
    manifest = {
        "version": 1,
        "pipeline": exp.pipeline.to_dict(),
        "k": exp.shape.k,
        "base_seed": exp.base_seed,
        "key_sha256": key_digest(key),
        "images": IMAGES,
        "items": items,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out / MANIFEST


@dataclass
class LoadedEmbedding:
    cfg: PipelineConfig
    images: np.ndarray
    watermarks: np.ndarray
    seeds: list
    manifest: dict
    root: Path

    def latent(self, i: int, which: str = "zT") -> np.ndarray:
        return load_latent(self.root / self.manifest["items"][i][which])


def read_embedding(data_dir, key: WatermarkKey | None = None) -> LoadedEmbedding:
    root = Path(data_dir)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise HarnessError(f"no manifest at {mpath}; run embed first")
    manifest = json.loads(mpath.read_text())
    cfg = PipelineConfig.from_dict(manifest["pipeline"])
    if key is not None and manifest.get("key_sha256") != key_digest(key):
        raise HarnessError("watermark key does not match the one used for embedding")
    images = np.load(root / manifest["images"]).astype(np.float64)
    k = manifest["k"]
    wms = np.stack([unpack_bits(bytes.fromhex(it["watermark"]), k) for it in manifest["items"]])
    seeds = [it["seed"] for it in manifest["items"]]
    return LoadedEmbedding(cfg, images, wms, seeds, manifest, root)


def run_embed(exp: ExperimentConfig, out_dir=None, watermark_hex: str | None = None) -> Embedded:
    key = WatermarkKey.load(exp.path(exp.key))
    wm = None
    hex_text = watermark_hex or exp.watermark
    if hex_text:
        wm = unpack_bits(bytes.fromhex(hex_text), exp.shape.k)
    seeds = [item_seed(exp.base_seed, i) for i in range(exp.n_images)]
    parts = parallel_map(
        lambda b: embed_batch(exp.pipeline, key, seeds[b[0]:b[1]], wm),
        chunks(len(seeds), 128), exp.workers)
    emb = Embedded(
        np.concatenate([p.watermarks for p in parts]), np.concatenate([p.zT for p in parts]),
        np.concatenate([p.z0 for p in parts]), np.concatenate([p.images for p in parts]), seeds)
    write_embedding(exp.path(out_dir or exp.data_dir), exp, key, emb)
    return emb


@dataclass
class EvaluationResult:
    rows: list
    step_curves: dict  # (method, distortion) -> per-step mean accuracy


def run_evaluate(exp: ExperimentConfig, out_dir=None, data_dir=None, figures: bool = True) -> EvaluationResult:
    key = WatermarkKey.load(exp.path(exp.key))
    loaded = read_embedding(exp.path(data_dir or exp.data_dir), key)
    if loaded.cfg != exp.pipeline:
        raise HarnessError("embedding manifest was produced with a different pipeline config")
    models = {}
    for ext in exp.extractors:
        if ext.kind == "osi":
            ckpt = exp.path(ext.checkpoint)
            if not ckpt.exists():
                raise HarnessError(f"missing checkpoint {ckpt}")
            models[ext.id] = osinet.OsiModel.load(ckpt)
    out = exp.path(out_dir or Path(exp.data_dir) / "report")
    out.mkdir(parents=True, exist_ok=True)
    sink = RowSink(out / "results.csv")
    curves = {}
    cells = [CLEAN] + list(exp.distortion_suite)
    suite_names = {s.name for s in exp.distortion_suite}
    try:
        for ext in exp.extractors:
            for spec in cells:
                cell = evaluate_cell(
                    loaded.images, loaded.watermarks, ext, spec, exp.pipeline, key,
                    model=models.get(ext.id), base_seed=exp.base_seed, workers=exp.workers,
                    keep_path=ext.kind == "multistep")
                if cell.step_curve is not None:
                    curves[(cell.method, cell.distortion)] = cell.step_curve
                sink.write(result_rows(cell, exp.shape, exp.fpr_targets))
        sink.write(adv_rows(sink.rows, suite_names, exp.shape))
    finally:
        sink.close()
        _write_json(out / "results.json", exp, sink.rows)
    _write_curves(out / "step_curves.csv", curves)
    if figures:
        from . import plots
        plots.render_report(out, sink.rows, curves, exp.shape)
    return EvaluationResult(sink.rows, curves)


def _write_json(path, exp, rows):
    Path(path).write_text(json.dumps({"config": exp.to_dict(), "rows": rows}, indent=1))


def _write_curves(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "distortion", "step", "acc"])
        for (method, dist_name), curve in curves.items():
            for step, acc in enumerate(curve):
                w.writerow([method, dist_name, step, f"{acc:.6g}"])


def run_synth(exp: ExperimentConfig, out_path, n: int | None = None, seed: int | None = None):
    n = n or exp.n_train
    seed = exp.base_seed if seed is None else seed
    ds = toypipe.synth_dataset(n, exp.pipeline, seed)
    ds.save(out_path)
    return ds


def run_train(exp: ExperimentConfig, dataset_path, out_checkpoint, seed: int | None = None):
    try:
        data = toypipe.TripletSet.load(dataset_path)
    except (OSError, ValueError, KeyError) as exc:
        raise HarnessError(f"cannot read dataset {dataset_path}: {exc}") from None
    tc = exp.train if seed is None else replace(exp.train, seed=seed)
    model = osinet.OsiModel.init(data.cfg.shape.c, seed=tc.seed)
    result = osinet.train(model, data, tc, data.cfg)
    out = Path(out_checkpoint)
    result.model.save(out)
    hist = out.with_suffix(".history.csv")
    hist.write_text(result.history_csv())
    return result, hist
