"""Independent oracles shared by the unit and acceptance tests.

Nothing here calls the package's own evaluation or loss code: matching,
curve sweeps and the log-average are recomputed from first principles.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
import torch

from vis2therm.data import BoundingBox
from vis2therm.detector import Detection, DetectorConfig, YoloDetector
from vis2therm.evaluation import FrameEval
from vis2therm.gan import DiscriminatorConfig, GeneratorConfig
from vis2therm.perceptual import FeatureExtractor

# -- gradient checking ---------------------------------------------------------------

MINI_GEN = GeneratorConfig(
    base_channels=4,
    num_rrdb=1,
    dense_blocks_per_rrdb=1,
    convs_per_dense_block=2,
    growth_rate=2,
    downsample_factor=2,
)
MINI_DISC = DiscriminatorConfig(num_layers=2, base_features=4, num_scales=2)


def mini_phi(seed: int = 0) -> FeatureExtractor:
    torch.manual_seed(seed)
    det = YoloDetector(DetectorConfig(width=2, backbone_depth=(1, 1, 1, 1, 1), input_size=(32, 32)))
    return FeatureExtractor.from_detector(det.double(), "stages.stage2")


class KinkProbe:
    """Records the sign of every conv output in ``modules`` during a forward pass.

    Every piecewise-linear activation in the networks under test sits
    directly on a conv output, so an unchanged sign pattern between two
    parameter settings means no kink lies between them. ``extra`` may add
    further sign-sensitive tensors (the MAE residual, say).
    """

    def __init__(self, *modules):
        self.signs: list[torch.Tensor] = []
        self.handles = [
            m.register_forward_hook(lambda _m, _i, out: self.signs.append(out.detach() > 0))
            for module in modules
            for m in module.modules()
            if isinstance(m, torch.nn.Conv2d)
        ]

    def pattern(self, fn, extra=None):
        self.signs = []
        value = fn().item()
        pattern = list(self.signs)
        if extra is not None:
            pattern.append(extra().detach() > 0)
        return value, pattern

    def close(self):
        for h in self.handles:
            h.remove()


def gradient_check(loss_fn, params, probe: KinkProbe, extra=None, n_coords: int = 8, step: float = 1e-4, seed: int = 0):
    """Compare autograd gradients with central differences on sampled coordinates.

    Returns ``(worst relative error, coordinates checked, coordinates skipped)``.
    The relative error of a parameter tensor is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    over its sampled coordinates taken as vectors. A central difference only
    estimates the derivative when the loss is smooth on ``[p - step, p + step]``;
    coordinates whose perturbations flip the sign pattern seen by ``probe``
    cross an activation kink and are skipped.
    """
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        for q in params:
            q.grad = None
        loss = loss_fn()
        loss.backward()
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        coords = rng.choice(flat.numel(), min(n_coords, flat.numel()), replace=False)
        ana, num = [], []
        with torch.no_grad():
            _, base = probe.pattern(loss_fn, extra)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + step
                up, up_pat = probe.pattern(loss_fn, extra)
                flat[c] = orig - step
                down, down_pat = probe.pattern(loss_fn, extra)
                flat[c] = orig
                smooth = all(torch.equal(a, b) and torch.equal(a, d) for a, b, d in zip(base, up_pat, down_pat))
                if not smooth:
                    skipped += 1
                    continue
                ana.append(analytic[c].item())
                num.append((up - down) / (2 * step))
        checked += len(ana)
        ana, num = np.array(ana), np.array(num)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num)) if len(ana) else 0.0
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst, checked, skipped


# -- evaluation oracles ---------------------------------------------------------------


def oracle_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter) if inter > 0 else 0.0


def oracle_match(dets, gts, thr=0.5, ignore=()):
    """Greedy matching by explicit enumeration of still-free ground truths.

    Returns ``(tp_pairs, fp, fn, ignored)`` as sorted lists of indices.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    free = set(range(len(gts)))
    tp, fp, ignored = [], [], []
    for d in order:
        candidates = [(oracle_iou(dets[d].box, gts[g]), -g) for g in free]
        candidates = [c for c in candidates if c[0] >= thr]
        if candidates:
            _, neg_g = max(candidates)
            free.discard(-neg_g)
            tp.append((d, -neg_g))
        elif any(oracle_iou(dets[d].box, ig) >= thr for ig in ignore):
            ignored.append(d)
        else:
            fp.append(d)
    return sorted(tp), sorted(fp), sorted(free), sorted(ignored)


def oracle_curve(frames, thr=0.5):
    """Exhaustive threshold sweep: re-match every frame at every distinct confidence."""
    n_gt = sum(len(f.gts) for f in frames)
    confs = sorted({d.confidence for f in frames for d in f.dets}, reverse=True)
    points = [(0.0, 1.0)]
    for c in confs:
        tp = fp = 0
        for f in frames:
            kept = [d for d in f.dets if d.confidence >= c]
            m = oracle_match(kept, f.gts, thr, f.ignore)
            tp += len(m[0])
            fp += len(m[1])
        points.append((fp / len(frames), (n_gt - tp) / n_gt))
    return points


def oracle_lamr(points, lo=1e-2, hi=1.0, n=9):
    refs = [10 ** (math.log10(lo) + k * (math.log10(hi) - math.log10(lo)) / (n - 1)) for k in range(n)]
    logs = []
    for r in refs:
        mr = 1.0
        for f, m in points:
            if f <= r:
                mr = m
        logs.append(math.log(max(mr, 1e-10)))
    return math.exp(sum(logs) / n)


def all_permutations_agree(dets, gts, thr=0.5):
    """Counts under every input ordering of ``dets`` (the greedy rule is order-defined by confidence)."""
    counts = set()
    for perm in itertools.permutations(range(len(dets))):
        m = oracle_match([dets[i] for i in perm], gts, thr)
        counts.add((len(m[0]), len(m[1]), len(m[2])))
    return counts


FIXTURES = Path(__file__).parent / "fixtures"


def load_eval_cases():
    """Committed scoring fixtures as ``[(name, [FrameEval, ...]), ...]``."""
    raw = json.loads((FIXTURES / "eval_cases.json").read_text(encoding="utf-8"))
    cases = []
    for case in raw["cases"]:
        frames = [
            FrameEval(
                tuple(Detection(BoundingBox(*d[:4]), d[4]) for d in f["dets"]),
                tuple(BoundingBox(*g) for g in f["gts"]),
                tuple(BoundingBox(*g) for g in f["ignore"]),
            )
            for f in case["frames"]
        ]
        cases.append((case["name"], frames))
    return cases


# -- learning-rate table ----------------------------------------------------------------

# (regime name, real fraction, per-epoch learning rates for epochs 0..9), written out by hand
LR_TABLE = [
    ("synthesized", 0.0, [1e-4] * 3 + [1e-5] * 3 + [1e-6] * 3 + [1e-7]),
    ("mixed-10", 0.1, [1e-4] * 3 + [1e-5] * 3 + [1e-6] * 3 + [1e-7]),
    ("mixed-20", 0.2, [1e-4] * 3 + [1e-5] * 3 + [1e-6] * 3 + [1e-7]),
    ("mixed-30", 0.3, [1e-4] * 3 + [1e-5] * 3 + [1e-6] * 3 + [1e-7]),
    ("mixed-40", 0.4, [1e-4] * 3 + [1e-5] * 3 + [1e-6] * 3 + [1e-7]),
    ("mixed-50", 0.5, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("mixed-60", 0.6, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("mixed-70", 0.7, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("mixed-80", 0.8, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("mixed-90", 0.9, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("real", 1.0, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
    ("combined", 0.5, [1e-3] * 3 + [1e-4] * 3 + [1e-5] * 3 + [1e-6]),
]
