"""Trend studies on the toy channel: inversion-step sweeps, step-wise accuracy,
true-latent alignment, cipher equivalence, and fine-tuning strategies."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import distort, osinet, toypipe
from .bench import CLEAN, ExtractorSpec, accuracies, embed_batch, extract_batch, path_accuracies
from .cipher import Scheme, WatermarkKey
from .latentlab import item_seed
from .toypipe import PipelineConfig


def _seeds(n, base_seed):
    return [item_seed(base_seed, i) for i in range(n)]


def inversion_step_sweep(cfg: PipelineConfig, key: WatermarkKey, n: int, steps_list,
                         base_seed: int = 0) -> dict[int, float]:
    """Clean mean bit accuracy of multi-step inversion for each total step count."""
    emb = embed_batch(cfg, key, _seeds(n, base_seed))
    out = {}
    for steps in steps_list:
        ex = extract_batch(emb.images, ExtractorSpec("multistep", steps), cfg)
        out[int(steps)] = float(np.mean(accuracies(emb.watermarks, ex, key, cfg.shape)))
    return out


def stepwise_accuracy(cfg: PipelineConfig, key: WatermarkKey, n: int, steps: int = 50,
                      base_seed: int = 0, spec=CLEAN) -> np.ndarray:
    """Accuracy after each inversion step; entry 0 decodes the encoder output directly."""
    emb = embed_batch(cfg, key, _seeds(n, base_seed))
    images = distort.apply_batch(emb.images, spec)
    ex = extract_batch(images, ExtractorSpec("multistep", steps), cfg, keep_path=True)
    return path_accuracies(emb.watermarks, ex.path, key, cfg.shape)


def z0_alignment(cfg: PipelineConfig, key: WatermarkKey, n: int, steps: int = 50,
                 base_seed: int = 0) -> tuple[float, float]:
    """Mean accuracy inverting from the re-encoded latent versus from the true ``z0``."""
    emb = embed_batch(cfg, key, _seeds(n, base_seed))
    ext = ExtractorSpec("multistep", steps)
    encoded = accuracies(emb.watermarks, extract_batch(emb.images, ext, cfg), key, cfg.shape)
    aligned = accuracies(emb.watermarks, extract_batch(emb.images, ext, cfg, z0=emb.z0), key, cfg.shape)
    return float(np.mean(encoded)), float(np.mean(aligned))


def scheme_comparison(cfg: PipelineConfig, n: int, key_seed: int = 0, base_seed: int = 0,
                      suite=None, steps: int = 50) -> dict[str, dict[str, float]]:
    """Per-distortion mean accuracy under a ChaCha20 key and an XOR-pad key."""
    suite = [CLEAN] + list(suite if suite is not None else distort.default_suite())
    ext = ExtractorSpec("multistep", steps)
    out: dict[str, dict[str, float]] = {s.name: {} for s in suite}
    for scheme in (Scheme.CHACHA20, Scheme.XORPAD):
        key = WatermarkKey.from_seed(key_seed, scheme)
        emb = embed_batch(cfg, key, _seeds(n, base_seed))
        for spec in suite:
            images = distort.apply_batch(emb.images, spec.with_seed(item_seed(spec.seed, base_seed)))
            accs = accuracies(emb.watermarks, extract_batch(images, ext, cfg), key, cfg.shape)
            out[spec.name][scheme.name] = float(np.mean(accs))
    return out


def suite_accuracy(model, cfg: PipelineConfig, key: WatermarkKey, emb, suite=None,
                   base_seed: int = 0) -> dict[str, float]:
    """Mean accuracy of a one-step model on clean and each distortion, plus ``Adv.``."""
    suite = list(suite if suite is not None else distort.default_suite())
    ext = ExtractorSpec("osi", checkpoint="<memory>")
    out = {}
    for spec in [CLEAN] + suite:
        images = distort.apply_batch(emb.images, spec.with_seed(item_seed(spec.seed, base_seed)))
        ex = extract_batch(images, ext, cfg, model=model)
        out[spec.name] = float(np.mean(accuracies(emb.watermarks, ex, key, cfg.shape)))
    out["Adv."] = float(np.mean([out[s.name] for s in suite]))
    return out


@dataclass
class Timing:
    one_step: float
    multi_step: float
    encoder_passes: int
    classifier_passes: int
    drift_passes: int

    @property
    def speedup(self) -> float:
        return self.multi_step / self.one_step


def extraction_timing(model, cfg: PipelineConfig, image: np.ndarray, steps: int = 50,
                      repeats: int = 20) -> Timing:
    """Best-of-``repeats`` wall clock for one image, plus forward-pass counts of one OSI call."""
    toypipe.OP_COUNTS.clear()
    osinet.predict(model, image, cfg)
    counts = dict(toypipe.OP_COUNTS)

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    one = best(lambda: osinet.predict(model, image, cfg))
    multi = best(lambda: toypipe.invert_multistep(image, cfg, steps))
    return Timing(one, multi, counts.get("encode", 0), counts.get("classifier", 0), counts.get("drift", 0))


def strategy_comparison(data: toypipe.TripletSet, tc: osinet.TrainConfig, cfg: PipelineConfig,
                        key: WatermarkKey, n_eval: int = 200, eval_seed: int = 10 ** 9,
                        suite=None) -> dict[str, dict[str, float]]:
    """Train one model per fine-tuning strategy and score each on a held-out embedding."""
    emb = embed_batch(cfg, key, _seeds(n_eval, eval_seed))
    out = {}
    for strategy in osinet.Strategy:
        result = osinet.train(osinet.OsiModel.init(cfg.shape.c, tc.seed), data,
                              replace(tc, strategy=strategy), cfg)
        scores = suite_accuracy(result.model, cfg, key, emb, suite)
        scores["final_loss"] = result.history[-1].total if result.history else float("nan")
        out[strategy.value] = scores
    return out
