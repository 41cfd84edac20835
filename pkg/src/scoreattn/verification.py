"""Self-checks behind ``scoreattn verify``: gradients, oracles and invariants.

* gradients: analytic gradients of every parameterised operation against
  float64 central differences on random small configurations.
* oracles: vectorised computations against naive scalar loops (score
  attention, losses, metrics, schedule and clipping).
* invariants: convexity of the score-weighted reduction, masking and
  permutation invariances.

Each check returns a :class:`Check`; a suite never raises on a failed
comparison, so one broken component shows up as one failed row.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .aggregation import Aggregator, ScoreAttention, baseline_reduce, combine_k_retrieval
from .attention import AttentionBlock, MultiHeadAttention
from .encoders import BiGRU, Embedding, encode_regions, encode_text
from .layers import LayerNorm, Linear, SequenceBatch
from .metrics import EvalReport, fold_average, recall_at_k
from .optim import clip_global_norm, lr_at
from .pipeline import ModelConfig, PositionwiseFeedForward, VisualSemanticModel, VqaHead, \
    triplet_loss_hard, triplet_loss_sum, vqa_loss

GRAD_H = 1e-5
GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-6
SUITES = ("gradients", "oracles", "invariants")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(suite: str, name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failed check, not a crashed suite
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(suite, name, bool(passed), detail, time.perf_counter() - start)


def _mask(rng: np.random.Generator, b: int, n: int) -> np.ndarray:
    """Random validity mask with at least one valid position per row."""
    mask = rng.random((b, n)) < 0.7
    mask[np.arange(b), rng.integers(0, n, size=b)] = True
    return mask


def _seq(rng, b: int, n: int, d: int, mask=None, requires_grad: bool = False) -> SequenceBatch:
    data = T.Tensor(rng.normal(size=(b, n, d)), requires_grad=requires_grad)
    return SequenceBatch(data, _mask(rng, b, n) if mask is None else mask)


# --------------------------------------------------------------------------
# gradients


def gradient_error(loss_fn: Callable[[], T.Tensor], tensors: list[T.Tensor],
                   rng: np.random.Generator, max_coords: int = 12, h: float = GRAD_H) -> float:
    """Worst per-tensor relative error between backprop and central differences.

    For each tensor, up to ``max_coords`` random coordinates are perturbed;
    the error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    in the 2-norm over those coordinates, with ``floor = GRAD_FLOOR *
    max(1, |loss|)``. The floor keeps exactly-zero
    gradients (a softmax over one valid position, say) from turning
    finite-difference round-off into a relative error of 1.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    # central differences carry round-off of order eps * |loss| / h per coordinate
    floor = GRAD_FLOOR * max(1.0, abs(loss.item()))
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = grad.reshape(-1)[coords]
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            up = loss_fn().item()
            flat[c] = old - h
            down = loss_fn().item()
            flat[c] = old
            numeric[j] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def _weighted(out: T.Tensor, rng) -> Callable[[T.Tensor], T.Tensor]:
    weights = rng.normal(size=out.shape) / np.sqrt(out.data.size)
    return lambda y: T.tsum(y * weights)


def _dims(rng) -> tuple[int, int]:
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 16 // heads + 1))
    return max(d, 2), heads if d % heads == 0 else 1


def _case_attention(rng):
    d, heads = _dims(rng)
    b, nq, nk = (int(v) for v in rng.integers(1, 7, size=3))
    mha = MultiHeadAttention(d, heads, rng)
    x, z = _seq(rng, b, nq, d, requires_grad=True), _seq(rng, b, nk, d, requires_grad=True)
    objective = _weighted(mha(x, z), rng)
    return (lambda: objective(mha(x, z))), mha.parameters() + [x.data, z.data], f"d={d} h={heads}"


def _case_block(rng, cross: bool):
    d, heads = _dims(rng)
    b, nq, nk = (int(v) for v in rng.integers(1, 7, size=3))
    block = AttentionBlock(d, heads, float(rng.choice([1.0, 0.8])), rng)
    x, z = _seq(rng, b, nq, d, requires_grad=True), _seq(rng, b, nk, d, requires_grad=True)

    def run():
        block.dropout_rng = np.random.default_rng(11)  # same mask on every evaluation
        return (block(x, z) if cross else block(x)).data

    objective = _weighted(run(), rng)
    inputs = [x.data, z.data] if cross else [x.data]
    return (lambda: objective(run())), block.parameters() + inputs, f"d={d} h={heads} cross={cross}"


def _case_score_attention(rng):
    d, heads = _dims(rng)
    k = int(rng.integers(1, 4))
    b, nx, nz = (int(v) for v in rng.integers(1, 7, size=3))
    sa = ScoreAttention(d, heads, k, rng)
    x, z = _seq(rng, b, nx, d, requires_grad=True), _seq(rng, b, nz, d, requires_grad=True)
    objective = _weighted(sa(x, z), rng)
    return (lambda: objective(sa(x, z))), sa.parameters() + [x.data, z.data], f"d={d} h={heads} k={k}"


def _case_gru(rng):
    d = int(rng.integers(2, 9))
    word_dim = int(rng.integers(2, 7))
    b, n = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    emb = Embedding(rng.normal(0, 0.5, size=(12, word_dim)))
    gru = BiGRU(word_dim, d, rng)
    tokens = rng.integers(1, 12, size=(b, n))
    mask = _mask(rng, b, n)
    objective = _weighted(encode_text(gru, emb, tokens, mask).data, rng)
    return (lambda: objective(encode_text(gru, emb, tokens, mask).data)), \
        gru.parameters() + emb.parameters(), f"d={d} n={n}"


def _case_regions(rng):
    d, width = int(rng.integers(2, 17)), int(rng.integers(2, 9))
    proj = Linear(width, d, rng)
    regions = T.Tensor(rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 7)), width)),
                       requires_grad=True)
    objective = _weighted(encode_regions(proj, regions).data, rng)
    return (lambda: objective(encode_regions(proj, regions).data)), proj.parameters() + [regions], \
        f"d={d} width={width}"


def _case_vqa_head(rng):
    d = int(rng.integers(2, 17))
    b, k, n_answers = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(2, 7))
    head = VqaHead(d, n_answers, 1.0, rng)
    y_img = T.Tensor(rng.normal(size=(b, k, d)), requires_grad=True)
    y_txt = T.Tensor(rng.normal(size=(b, k, d)), requires_grad=True)
    targets = rng.choice([0.0, 1 / 3, 2 / 3, 1.0], size=(b, n_answers))
    return (lambda: vqa_loss(head(y_img, y_txt), targets)), head.parameters() + [y_img, y_txt], \
        f"d={d} k={k} answers={n_answers}"


def _case_triplet(rng):
    b = int(rng.integers(2, 9))
    sim = T.Tensor(rng.uniform(-1, 1, size=(b, b)), requires_grad=True)
    margin = float(rng.uniform(0.05, 0.5))
    loss = triplet_loss_hard if rng.random() < 0.7 else triplet_loss_sum
    return (lambda: loss(sim, margin)), [sim], f"B={b} {loss.__name__}"


def _case_similarity(rng):
    b, k, d = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 9))
    a = T.Tensor(rng.normal(size=(b, k, d)), requires_grad=True)
    c = T.Tensor(rng.normal(size=(b, k, d)), requires_grad=True)
    all_pairs = bool(rng.random() < 0.5)
    w = rng.normal(size=b)
    return (lambda: T.tsum(combine_k_retrieval(a, c, all_pairs) * w)), [a, c], \
        f"k={k} all_pairs={all_pairs}"


def _case_baseline(rng):
    kind = str(rng.choice(["mean", "max", "logsumexp", "conv1d", "cls"]))
    d, b, n = int(rng.integers(2, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
    agg = Aggregator(kind, d, 1, 1, n, rng)
    x = _seq(rng, b, n, d, requires_grad=True)
    if kind == "cls":
        x.mask[:, 0] = True  # the summary slot is always valid

    def run():
        return agg(x, x)

    objective = _weighted(run(), rng)
    return (lambda: objective(run())), agg.parameters() + [x.data], f"{kind} d={d} n={n}"


def _case_feed_forward(rng):
    d, hidden = int(rng.integers(2, 17)), int(rng.integers(2, 17))
    ff = PositionwiseFeedForward(d, hidden, 1.0, rng)
    norm = LayerNorm(d)
    norm.gain.data = rng.normal(1.0, 0.2, size=d)
    y = T.Tensor(rng.normal(size=(int(rng.integers(1, 5)), d)), requires_grad=True)
    objective = _weighted(norm(ff(y)), rng)
    return (lambda: objective(norm(ff(y)))), ff.parameters() + norm.parameters() + [y], \
        f"d={d} hidden={hidden}"


def _case_model(rng):
    task = str(rng.choice(["retrieval", "vqa"]))
    aggregator = str(rng.choice(["score_attention", "mean", "max", "logsumexp", "conv1d", "cls"]))
    heads = int(rng.choice([1, 2]))
    # at d=2 layer norm maps every vector to +-(1, -1), similarities tie and
    # the hardest-negative max sits on a kink that central differences straddle
    d = int(rng.choice([4, 6, 8]))
    n_len = int(rng.integers(2, 5))
    config = ModelConfig(d=d, heads=heads, k=int(rng.integers(1, 3)), task=task, aggregator=aggregator,
                         max_regions=n_len, max_question_len=n_len, max_caption_len=n_len,
                         feature_width=5, word_dim=4, dropout_keep=1.0).validate()
    n_answers = 4 if task == "vqa" else 0
    model = VisualSemanticModel(config, 15, n_answers, rng)
    b = 3
    regions = rng.normal(size=(b, n_len, 5))
    tokens = rng.integers(2, 15, size=(b, n_len))
    tokens[0, -1] = 0  # one padded caption position
    targets = rng.choice([0.0, 1 / 3, 1.0], size=(b, 4))

    def run():
        img, txt = model.encode(regions, tokens)
        if task == "vqa":
            return vqa_loss(model.head(*model.fuse(img, txt)), targets)
        return triplet_loss_hard(model.similarity_matrix(img, txt), 0.9)

    return run, model.parameters(), f"{task} {aggregator} d={d} k={config.k}", 3


GRADIENT_CASES = [
    ("multi_head_attention", _case_attention, 6),
    ("cross_attention_block", lambda rng: _case_block(rng, True), 5),
    ("self_attention_block", lambda rng: _case_block(rng, False), 5),
    ("score_attention", _case_score_attention, 8),
    ("gru_text_encoder", _case_gru, 5),
    ("region_projection", _case_regions, 3),
    ("vqa_head_loss", _case_vqa_head, 5),
    ("triplet_losses", _case_triplet, 6),
    ("cosine_similarity", _case_similarity, 3),
    ("baseline_reductions", _case_baseline, 8),
    ("feed_forward_layer_norm", _case_feed_forward, 3),
    ("full_model", _case_model, 6),
]


def gradients_suite(seed: int = 0) -> list[Check]:
    """One check per operation family, each over several random configurations."""
    checks = []
    for name, build, n_configs in GRADIENT_CASES:
        def run(build=build, n_configs=n_configs, name=name):
            rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
            worst, where = 0.0, ""
            with T.default_dtype(np.float64):
                for _ in range(n_configs):
                    case = build(rng)
                    fn, tensors, label = case[:3]
                    coords = case[3] if len(case) > 3 else 12
                    err = gradient_error(fn, tensors, rng, max_coords=coords)
                    if err >= worst:
                        worst, where = err, label
            return worst < GRAD_TOL, f"{n_configs} configs, max rel err {worst:.2e} ({where})"
        checks.append(_timed("gradients", name, run))
    return checks


def gradient_configurations() -> int:
    return sum(n for _, _, n in GRADIENT_CASES)


# --------------------------------------------------------------------------
# naive oracles


def naive_score_logits(sa: ScoreAttention, x: np.ndarray, x_mask: np.ndarray,
                       z: np.ndarray, z_mask: np.ndarray) -> np.ndarray:
    """Score attention logits (B, k, n_x) with explicit loops over every index.

    Instance i attends from each x position to z's valid positions with its
    own heads, concatenates the head outputs and maps them to a scalar.
    """
    b, n_x, d = x.shape
    n_z = z.shape[1]
    heads, k = sa.heads, sa.k
    dh = d // heads
    wq, bq = sa.query.weight.data, sa.query.bias.data
    wk, bk = sa.key.weight.data, sa.key.bias.data
    wv, bv = sa.value.weight.data, sa.value.bias.data
    out = np.zeros((b, k, n_x))
    for n in range(b):
        for i in range(k):
            for p in range(n_x):
                attended = np.zeros(d)
                for h in range(heads):
                    hc = slice(i * d + h * dh, i * d + (h + 1) * dh)
                    q = x[n, p] @ wq[:, hc] + bq[hc]
                    logits, values = [], []
                    for j in range(n_z):
                        if not z_mask[n, j]:
                            continue
                        key = z[n, j] @ wk[:, hc] + bk[hc]
                        logits.append(sum(q[c] * key[c] for c in range(dh)) / math.sqrt(dh))
                        values.append(z[n, j] @ wv[:, hc] + bv[hc])
                    top = max(logits)
                    weights = [math.exp(v - top) for v in logits]
                    total = sum(weights)
                    head = np.zeros(dh)
                    for w, v in zip(weights, values):
                        head += (w / total) * v
                    attended[h * dh:(h + 1) * dh] = head
                out[n, i, p] = sum(attended[c] * sa.score_weight.data[i, c] for c in range(d)) \
                    + sa.score_bias.data[i]
    return out


def naive_scores(logits: np.ndarray, x_mask: np.ndarray) -> np.ndarray:
    b, k, n_x = logits.shape
    out = np.zeros_like(logits)
    for n in range(b):
        valid = [p for p in range(n_x) if x_mask[n, p]]
        for i in range(k):
            top = max(logits[n, i, p] for p in valid)
            total = sum(math.exp(logits[n, i, p] - top) for p in valid)
            for p in valid:
                out[n, i, p] = math.exp(logits[n, i, p] - top) / total
    return out


def naive_reduce(scores: np.ndarray, x: np.ndarray) -> np.ndarray:
    b, k, n_x = scores.shape
    d = x.shape[2]
    out = np.zeros((b, k, d))
    for n in range(b):
        for i in range(k):
            for c in range(d):
                out[n, i, c] = sum(scores[n, i, p] * x[n, p, c] for p in range(n_x))
    return out


def _score_instance(rng):
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    b, n_x, n_z = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
    sa = ScoreAttention(d, heads, k, rng)
    x, z = _seq(rng, b, n_x, d), _seq(rng, b, n_z, d)
    return sa, x, z


def _check_score_oracle(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 201))
    worst = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            sa, x, z = _score_instance(rng)
            fast = sa.scores(x, z).data
            logits = naive_score_logits(sa, x.data.data, x.mask, z.data.data, z.mask)
            slow = naive_scores(logits, x.mask)
            worst = max(worst, float(np.max(np.abs(sa.logits(x, z).data - logits) * x.mask[:, None, :])),
                        float(np.max(np.abs(fast - slow))))
    return worst <= 1e-10, f"{instances} instances, max abs diff {worst:.1e}"


def _check_reduce_oracle(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 202))
    worst = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            sa, x, z = _score_instance(rng)
            scores = sa.scores(x, z).data
            out = sa(x, z).data
            worst = max(worst, float(np.max(np.abs(out - naive_reduce(scores, x.data.data)))))
    return worst <= 1e-10, f"{instances} instances, max abs diff {worst:.1e}"


def naive_multi_head(mha: MultiHeadAttention, q: np.ndarray, kv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    b, n_q, d = q.shape
    dh = d // mha.heads
    out = np.zeros((b, n_q, d))
    for n in range(b):
        for p in range(n_q):
            merged = np.zeros(d)
            for h in range(mha.heads):
                hc = slice(h * dh, (h + 1) * dh)
                qv = q[n, p] @ mha.query.weight.data[:, hc] + mha.query.bias.data[hc]
                valid = [j for j in range(kv.shape[1]) if mask[n, j]]
                logits = [float(qv @ (kv[n, j] @ mha.key.weight.data[:, hc] + mha.key.bias.data[hc]))
                          / math.sqrt(dh) for j in valid]
                top = max(logits)
                w = [math.exp(v - top) for v in logits]
                for wj, j in zip(w, valid):
                    merged[hc] += wj / sum(w) * (kv[n, j] @ mha.value.weight.data[:, hc]
                                                 + mha.value.bias.data[hc])
            out[n, p] = merged @ mha.output.weight.data + mha.output.bias.data
    return out


def _check_attention_oracle(seed: int, instances: int = 50) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 203))
    worst = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            d, heads = _dims(rng)
            mha = MultiHeadAttention(d, heads, rng)
            b, n_q, n_k = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
            x, z = _seq(rng, b, n_q, d), _seq(rng, b, n_k, d)
            slow = naive_multi_head(mha, x.data.data, z.data.data, z.mask)
            worst = max(worst, float(np.max(np.abs(mha(x, z).data - slow))))
    return worst <= 1e-10, f"{instances} instances, max abs diff {worst:.1e}"


def brute_force_triplet(sim: np.ndarray, margin: float) -> float:
    b = sim.shape[0]
    total = 0.0
    for i in range(b):
        worst_caption = max(sim[i, j] for j in range(b) if j != i)
        worst_image = max(sim[j, i] for j in range(b) if j != i)
        total += max(0.0, margin - sim[i, i] + worst_caption)
        total += max(0.0, margin - sim[i, i] + worst_image)
    return total / b


def _check_triplet_oracle(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 204))
    worst = 0.0
    with T.default_dtype(np.float64):
        for _ in range(instances):
            b = int(rng.integers(2, 9))
            sim = rng.uniform(-1, 1, size=(b, b))
            margin = float(rng.uniform(0, 0.5))
            fast = triplet_loss_hard(T.Tensor(sim), margin).item()
            worst = max(worst, abs(fast - brute_force_triplet(sim, margin)))
        worked = np.full((4, 4), 0.5)
        np.fill_diagonal(worked, 0.9)
        example = triplet_loss_hard(T.Tensor(worked), 0.2).item()
    ok = worst <= 1e-12 and example == 0.0
    return ok, f"{instances} matrices, max abs diff {worst:.1e}; worked example loss {example}"


def _check_vqa_loss_oracle(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 205))
    worst = 0.0
    with T.default_dtype(np.float64):
        for _ in range(instances):
            b, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            logits = rng.normal(0, 3, size=(b, n))
            targets = rng.choice([0.0, 1 / 3, 2 / 3, 1.0], size=(b, n))
            total = 0.0
            for i in range(b):
                for j in range(n):
                    p = 1.0 / (1.0 + math.exp(-logits[i, j]))
                    total -= targets[i, j] * math.log(p) + (1 - targets[i, j]) * math.log(1 - p)
            worst = max(worst, abs(vqa_loss(T.Tensor(logits), targets).item() - total / (b * n)))
    return worst <= 1e-12, f"{instances} instances, max abs diff {worst:.1e}"


def brute_force_recall(sim: np.ndarray, ground_truth, k: int) -> float:
    hits = 0
    for row, gt in zip(sim, ground_truth):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += any(j in gt for j in order[:k])
    return 100.0 * hits / len(sim)


def _check_recall_oracle(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 206))
    mismatches = non_monotone = 0
    for _ in range(instances):
        n_q, n_t = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        # rounded scores make ties common, which exercises the tie rule
        sim = np.round(rng.normal(size=(n_q, n_t)), 1)
        gt = [set(rng.choice(n_t, size=int(rng.integers(1, n_t + 1)), replace=False).tolist())
              for _ in range(n_q)]
        previous = -1.0
        for k in range(1, n_t + 1):
            value = recall_at_k(sim, gt, k)
            mismatches += value != brute_force_recall(sim, gt, k)
            non_monotone += value < previous
            previous = value
    ok = mismatches == 0 and non_monotone == 0
    return ok, f"{instances} matrices, {mismatches} mismatches, {non_monotone} monotonicity violations"


def _check_fold_average(seed: int) -> tuple[bool, str]:
    reports = [EvalReport("retrieval", {"r@1": 40.0, "r@5": 80.0}),
               EvalReport("retrieval", {"r@1": 50.0, "r@5": 90.0}),
               EvalReport("retrieval", {"r@1": 60.0, "r@5": 70.0}),
               EvalReport("retrieval", {"r@1": 30.0, "r@5": 100.0}),
               EvalReport("retrieval", {"r@1": 20.0, "r@5": 60.0})]
    merged = fold_average(reports)
    ok = merged.metrics == {"r@1": 40.0, "r@5": 80.0} and merged.folds == 5
    return ok, f"averaged {merged.metrics} over {merged.folds} folds"


def _check_schedule(seed: int) -> tuple[bool, str]:
    lrs = [lr_at(0.0005, e) for e in range(30)]
    expected = [0.0005 * 10.0 ** -(e // 10) for e in range(30)]
    sched_ok = all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(lrs, expected))
    sched_ok &= lrs[0] == 0.0005 and math.isclose(lrs[10], 0.00005) and math.isclose(lrs[25], 0.000005)
    grad = np.array([3.0, 4.0])
    clip_global_norm([grad], 2.0)
    clip_ok = np.allclose(grad, [1.2, 1.6], rtol=0, atol=1e-12)
    rng = np.random.default_rng((seed, 207))
    worst = 0.0
    for _ in range(100):
        grads = [rng.normal(0, 10.0 ** rng.uniform(-3, 6), size=rng.integers(1, 6, size=2))
                 for _ in range(3)]
        clip_global_norm(grads, 2.0)
        worst = max(worst, float(np.sqrt(sum(np.sum(g * g) for g in grads))))
    clip_ok &= worst <= 2.0 * (1 + 1e-12)
    return sched_ok and clip_ok, f"schedule ok={sched_ok}; [3,4] -> {grad.tolist()}; max post-norm {worst:.6f}"


def oracles_suite(seed: int = 0) -> list[Check]:
    return [
        _timed("oracles", "score_logits_and_softmax", lambda: _check_score_oracle(seed)),
        _timed("oracles", "score_weighted_reduction", lambda: _check_reduce_oracle(seed)),
        _timed("oracles", "multi_head_attention", lambda: _check_attention_oracle(seed)),
        _timed("oracles", "triplet_loss_hard", lambda: _check_triplet_oracle(seed)),
        _timed("oracles", "vqa_loss", lambda: _check_vqa_loss_oracle(seed)),
        _timed("oracles", "recall_at_k", lambda: _check_recall_oracle(seed)),
        _timed("oracles", "fold_average", lambda: _check_fold_average(seed)),
        _timed("oracles", "lr_schedule_and_clipping", lambda: _check_schedule(seed)),
    ]


# --------------------------------------------------------------------------
# invariants


def _check_convexity(seed: int, instances: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 301))
    outside = bad_sum = leaked = 0
    worst_sum = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            sa, x, z = _score_instance(rng)
            scores = sa.scores(x, z).data
            y = sa(x, z).data
            data = x.data.data
            for n in range(x.batch):
                valid = data[n][x.mask[n]]
                lo, hi = valid.min(axis=0), valid.max(axis=0)
                slack = 1e-12 * (1 + np.abs(valid).max())
                outside += int(np.any((y[n] < lo - slack) | (y[n] > hi + slack)))
            sums = scores.sum(axis=-1)
            worst_sum = max(worst_sum, float(np.max(np.abs(sums - 1))))
            bad_sum += int(np.any(np.abs(sums - 1) > 1e-6))
            leaked += int(np.any(scores[~np.broadcast_to(x.mask[:, None, :], scores.shape)] != 0.0))
    ok = outside == 0 and bad_sum == 0 and leaked == 0
    return ok, (f"{instances} instances: {outside} outside hull, max |sum-1| {worst_sum:.1e}, "
                f"{leaked} with masked weight")


def _scramble_padding(rng, seq: SequenceBatch) -> SequenceBatch:
    data = seq.data.data.copy()
    data[~seq.mask] = rng.normal(0, 100, size=data[~seq.mask].shape)
    return SequenceBatch(T.Tensor(data), seq.mask)


def _permute(seq: SequenceBatch, perm: np.ndarray) -> SequenceBatch:
    return SequenceBatch(T.Tensor(seq.data.data[:, perm]), seq.mask[:, perm])


def _check_attention_invariance(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 302))
    worst_mask = worst_perm = worst_q = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            d, heads = _dims(rng)
            mha = MultiHeadAttention(d, heads, rng)
            b, n_q, n_k = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
            x, z = _seq(rng, b, n_q, d), _seq(rng, b, n_k, d)
            base = mha(x, z).data
            worst_mask = max(worst_mask, float(np.max(np.abs(mha(x, _scramble_padding(rng, z)).data - base))))
            perm = rng.permutation(n_k)
            worst_perm = max(worst_perm, float(np.max(np.abs(mha(x, _permute(z, perm)).data - base))))
            qperm = rng.permutation(n_q)
            worst_q = max(worst_q, float(np.max(np.abs(mha(_permute(x, qperm), z).data - base[:, qperm]))))
    worst = max(worst_mask, worst_perm, worst_q)
    return worst <= 1e-9, (f"{instances} instances: padded keys {worst_mask:.1e}, "
                           f"key permutation {worst_perm:.1e}, query equivariance {worst_q:.1e}")


def _check_aggregation_invariance(seed: int, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng((seed, 303))
    worst_mask = worst_perm = 0.0
    with T.default_dtype(np.float64), T.no_grad():
        for i in range(instances):
            kind = ("score_attention", "mean", "max", "logsumexp")[i % 4]
            d, heads = _dims(rng)
            agg = Aggregator(kind, d, heads, int(rng.integers(1, 4)), 6, rng)
            b, n_x, n_z = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
            x, z = _seq(rng, b, n_x, d), _seq(rng, b, n_z, d)
            base = agg(x, z).data
            scrambled = agg(_scramble_padding(rng, x), _scramble_padding(rng, z)).data
            worst_mask = max(worst_mask, float(np.max(np.abs(scrambled - base))))
            permuted = agg(_permute(x, rng.permutation(n_x)), _permute(z, rng.permutation(n_z))).data
            worst_perm = max(worst_perm, float(np.max(np.abs(permuted - base))))
    worst = max(worst_mask, worst_perm)
    return worst <= 1e-9, f"{instances} instances: padding {worst_mask:.1e}, permutation {worst_perm:.1e}"


def _check_baseline_bounds(seed: int, instances: int = 200) -> tuple[bool, str]:
    """Mean lies in the hull, max hits the largest valid entry, logsumexp bounds max."""
    rng = np.random.default_rng((seed, 304))
    failures = 0
    with T.default_dtype(np.float64), T.no_grad():
        for _ in range(instances):
            b, n, d = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 6))
            x = _seq(rng, b, n, d)
            mean = baseline_reduce("mean", x).data
            top = baseline_reduce("max", x).data
            lse = baseline_reduce("logsumexp", x).data
            for i in range(b):
                valid = x.data.data[i][x.mask[i]]
                failures += not np.allclose(mean[i], valid.mean(axis=0), atol=1e-12)
                failures += not np.array_equal(top[i], valid.max(axis=0))
                failures += bool(np.any(lse[i] < top[i] - 1e-12)
                                 or np.any(lse[i] > top[i] + math.log(len(valid)) + 1e-12))
    return failures == 0, f"{instances} instances, {failures} failures"


def invariants_suite(seed: int = 0) -> list[Check]:
    return [
        _timed("invariants", "score_reduction_convexity", lambda: _check_convexity(seed)),
        _timed("invariants", "attention_mask_and_permutation", lambda: _check_attention_invariance(seed)),
        _timed("invariants", "aggregation_mask_and_permutation",
               lambda: _check_aggregation_invariance(seed)),
        _timed("invariants", "baseline_reduction_bounds", lambda: _check_baseline_bounds(seed)),
    ]


def run_suite(suite: str = "all", seed: int = 0) -> list[Check]:
    if suite == "all":
        return gradients_suite(seed) + oracles_suite(seed) + invariants_suite(seed)
    runners = {"gradients": gradients_suite, "oracles": oracles_suite, "invariants": invariants_suite}
    if suite not in runners:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(runners)} or all")
    return runners[suite](seed)


def format_checks(checks: list[Check]) -> str:
    name_w = max(len(f"{c.suite}/{c.name}") for c in checks)
    lines = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"{status}  {f'{c.suite}/{c.name}'.ljust(name_w)}  {c.seconds:6.2f}s  {c.detail}")
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    return "\n".join(lines)
