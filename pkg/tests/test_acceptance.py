"""Acceptance gate: every criterion at its stated tolerance, one line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
PASS lines. The directional experiments (criteria 7-9) share one compare run
over the default toy dataset, three seeds, three objectives.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from test_autodiff import ALL_PRIMS, _fd_case

from bearlab import autodiff as ad
from bearlab import catalog as cat
from bearlab import data as datamod
from bearlab import experiment as exp
from bearlab import objectives as obj
from bearlab.catalog import BOS_ID, EOS_ID
from bearlab.cli import main as cli_main
from bearlab.decode import DecodeConfig, beam_search, exhaustive_rank
from bearlab.metrics import hit_ratio_at_k, ndcg_at_k, pruning_rate_at_k
from bearlab.model import ModelConfig, SequenceModel


def _ok(n, text):
    print(f"\nPASS criterion {n}: {text}")


def random_world(rng, n_titles, embed=6, scale=0.8):
    letters = "abcdef"
    titles = set()
    while len(titles) < n_titles:
        size = int(rng.integers(1, 5))
        titles.add("".join(rng.choice(list(letters), size=size)))
    vocab, items, trie = cat.build_catalog(sorted(titles))
    config = ModelConfig(vocab_size=len(vocab), embed_dim=embed, hidden_dim=embed,
                         max_context=24, seed=int(rng.integers(0, 2**31)))
    model = SequenceModel(config)
    init = np.random.default_rng(config.seed + 1)
    for name in model.store.names():
        shape = model.store.value(name).shape
        model.store.set_value(name, init.uniform(-scale, scale, size=shape))
    return vocab, items, trie, model


# -- criterion 1: oracle equivalence ----------------------------------------


def test_criterion_01_beam_equals_exhaustive_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    for trial in range(20):
        vocab, items, trie, model = random_world(rng, int(rng.integers(8, 18)))
        prompt = (BOS_ID, int(rng.integers(4, len(vocab))))
        finals, _ = beam_search(model, prompt, trie,
                                DecodeConfig(beam_width=len(items)))
        ranking = exhaustive_rank(model, prompt, items)
        assert [(h.item_id, h.log_prob) for h in finals] == ranking, trial
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _ok(1, f"20 wide-beam rankings bit-equal to the exhaustive oracle "
           f"({elapsed:.1f}s < 30s)")


# -- criterion 2: necessary-condition soundness ------------------------------


def test_criterion_02_no_survivor_violates_local_top_b():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2002)
    survivors_checked = 0
    for trial in range(1000):
        vocab, items, trie, model = random_world(rng, int(rng.integers(6, 12)),
                                                 embed=4)
        b = int(rng.integers(1, 5))
        prompt = (BOS_ID, int(rng.integers(4, len(vocab))))
        finals, trace = beam_search(model, prompt, trie, DecodeConfig(beam_width=b))
        for record in trace.steps:
            expansion_of = {e.tokens: e for e in record.expansions}
            for tokens, _score, _fin in record.survivors:
                e = expansion_of.get(tokens)
                if e is None:
                    continue  # finished carryover, no token added this step
                dist = model.next_token_distribution(prompt + tokens[:-1])
                lp = math.log(max(float(dist[e.token]), 1e-12))
                assert lp >= record.parent_thresholds[e.parent], (trial, tokens)
                survivors_checked += 1
        # survived positives satisfy the necessary condition along their path
        positive = items[int(rng.integers(0, len(items)))]
        if any(h.tokens == positive.token_ids for h in finals):
            ctx = list(prompt)
            rows = []
            for tok in positive.token_ids:
                rows.append(model.next_token_distribution(ctx))
                ctx.append(tok)
            masks = trie.valid_mask_walk(positive.token_ids, len(vocab))
            _, overall = obj.necessary_condition(np.array(rows),
                                                 positive.token_ids, b, masks)
            assert overall, trial
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    assert survivors_checked >= 1000
    _ok(2, f"{survivors_checked} survivors across 1000 traces, zero local "
           f"top-B violations ({elapsed:.1f}s < 60s)")


# -- criterion 3: gradient suite ---------------------------------------------


def _loss_world(rng):
    config = ModelConfig(vocab_size=7, embed_dim=3, hidden_dim=3, max_context=14,
                         seed=int(rng.integers(0, 2**31)))
    model = SequenceModel(config)
    init = np.random.default_rng(config.seed + 7)
    for name in model.store.names():
        shape = model.store.value(name).shape
        model.store.set_value(name, init.uniform(-0.7, 0.7, size=shape))
    p_len = int(rng.integers(2, 5))
    t_len = int(rng.integers(1, 4))
    prompt = [BOS_ID] + [int(t) for t in rng.integers(4, 7, size=p_len - 1)]
    target = [int(t) for t in rng.integers(4, 7, size=t_len)] + [EOS_ID]
    return config, model, (prompt, target)


def _boundary_gap(values, b):
    gaps = []
    for row in values:
        s = np.sort(row)[::-1]
        lo = s[b - 1] - s[b] if b < len(s) else np.inf
        hi = s[b - 2] - s[b - 1] if b >= 2 else np.inf
        gaps.append(min(lo, hi))
    return min(gaps)


def _rectifier_margin(model, instances):
    """Distance of the feed-forward rectifier pre-activations from zero; a
    finite-difference step must not straddle the kink."""
    from bearlab.model import _softmax

    g = model.store.value
    worst = np.inf
    t_max = max(len(p) + len(t) - 1 for p, t in instances)
    from bearlab.catalog import PAD_ID
    for prompt, target in instances:
        seq = list(prompt) + list(target[:-1])
        seq = seq + [PAD_ID] * (t_max - len(seq))
        x = g("embed")[np.array([seq])] + g("pos")[np.arange(t_max)]
        scale = 1.0 / math.sqrt(model.config.embed_dim)
        mask = model._causal_mask[:t_max, :t_max]
        q = x @ g("block0.wq")
        k = x @ g("block0.wk")
        v = x @ g("block0.wv")
        att = _softmax(q @ np.swapaxes(k, -1, -2) * scale + mask)
        h = x + (att @ v) @ g("block0.wo")
        pre = h @ g("block0.ff_w1") + g("block0.ff_b1")
        worst = min(worst, float(np.abs(pre).min()))
    return worst


def _fd_sweep(rng, build_fn, step, needs_gap=False, n=50):
    """Run grad_check over n random instances. Draws are resampled when a
    non-differentiability lies within the step's reach: a B-th rank boundary
    (for the margin-bearing losses) or a rectifier zero crossing."""
    checked = 0
    attempts = 0
    while checked < n:
        attempts += 1
        assert attempts < 60 * n, "too many degenerate draws"
        config, model, instance = _loss_world(rng)
        if _rectifier_margin(model, [instance]) < 50 * step:
            continue
        if needs_gap:
            values = model.batch_forward(ad.Tape(), [instance])[0].value
            if _boundary_gap(values, 2) < 5e-3:
                continue
        fn = build_fn(config, instance)
        err = ad.grad_check(fn, model.store, step=step)
        assert err < 1e-4, f"instance {checked}: rel error {err:.2e}"
        checked += 1
    return checked


def _headless_margin_dists(tape, store, head_w, head_b, config, instance):
    """Teacher-forced distribution rows built from the non-head parameters in
    `store`, with the output head held as constants. Mirrors the model's
    single-block attention forward; returns (dists node, hidden rows)."""
    prompt, target = instance
    seq = np.asarray(list(prompt) + list(target[:-1]), dtype=np.int64)
    t = len(seq)
    p = lambda name: tape.param(store, name)
    x = ad.add(ad.gather_rows(p("embed"), seq), ad.gather_rows(p("pos"), np.arange(t)))
    scale = tape.constant(1.0 / math.sqrt(config.embed_dim))
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -1e9
    q = ad.matmul(x, p("block0.wq"))
    k = ad.matmul(x, p("block0.wk"))
    v = ad.matmul(x, p("block0.wv"))
    scores = ad.add(ad.multiply(ad.matmul(q, ad.transpose_last2(k)), scale),
                    tape.constant(mask))
    h = ad.add(x, ad.matmul(ad.matmul(ad.softmax_last_axis(scores), v),
                            p("block0.wo")))
    f1 = ad.rectify(ad.add(ad.matmul(h, p("block0.ff_w1")), p("block0.ff_b1")))
    hidden = ad.add(h, ad.add(ad.matmul(f1, p("block0.ff_w2")), p("block0.ff_b2")))
    logits = ad.add(ad.matmul(hidden, tape.constant(head_w)), tape.constant(head_b))
    probs = ad.softmax_last_axis(logits)
    rows = (len(prompt) - 1) + np.arange(len(target))
    return ad.gather_rows(probs, rows), hidden.value[rows]


def _split_head(model):
    partial = ad.ParameterStore()
    for name in model.store.names():
        if not name.startswith("out."):
            partial.add(name, model.store.value(name).copy())
    return partial, model.store.value("out.w").copy(), model.store.value("out.b").copy()


def _head_gradient_oracle(model, instance, hp):
    """Closed-form output-head gradient of the pure-margin regularizer in
    flow mode: margins are exact logit differences, so
    d reg / d logits[t, j] = sigma(-z_t)/xi * (1[j=beta_t] - 1[j=y_t])."""
    tape = ad.Tape()
    node = model.batch_forward(tape, [instance])[0]
    values = node.value
    idx = obj.threshold_indices(values, hp.beam_width,
                                np.ones_like(values, dtype=bool))
    targets = np.asarray(instance[1])
    rows = np.arange(values.shape[0])
    log_beta = np.log(np.maximum(values[rows, idx], 1e-12))
    log_p = np.log(np.maximum(values[rows, targets], 1e-12))
    z = (log_beta - log_p) / hp.xi
    coeff = obj.sigma_xi(-z * hp.xi, hp.xi) / hp.xi  # sigma(-z)/xi
    d_logits = np.zeros_like(values)
    d_logits[rows, idx] += coeff
    d_logits[rows, targets] -= coeff

    # hidden rows feeding the head, via the headless rebuild
    partial, head_w, head_b = _split_head(model)
    probe = ad.Tape()
    _, hidden = _headless_margin_dists(probe, partial, head_w, head_b,
                                       model.config, instance)
    grad_w = hidden.T @ d_logits
    grad_b = d_logits.sum(axis=0)

    model.store.zero_grads()
    tape2 = ad.Tape()
    node2 = model.batch_forward(tape2, [instance])[0]
    reg, _ = obj.beam_aware_regularizer(node2, instance[1], hp)
    ad.backward(reg)
    np.testing.assert_allclose(model.store.grad("out.w"), grad_w, rtol=0, atol=1e-10)
    np.testing.assert_allclose(model.store.grad("out.b"), grad_b, rtol=0, atol=1e-10)


def test_criterion_03_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3003)

    # every primitive, 50 random instances each
    for name in ALL_PRIMS:
        prim_rng = np.random.default_rng(hash(name) % 2**31)
        for _ in range(50):
            fn, store = _fd_case(name, prim_rng)
            assert ad.grad_check(fn, store, step=1e-5) < 1e-4, name

    hp = obj.HyperParams(lam=1.5, xi=0.8, beam_width=2)

    def sft_fn(config, instance):
        def fn(tape, store):
            node = SequenceModel(config, store).batch_forward(tape, [instance])[0]
            return obj.sft_loss(node, instance[1])
        return fn

    def bear_fn(config, instance):
        def fn(tape, store):
            node = SequenceModel(config, store).batch_forward(tape, [instance])[0]
            return obj.bear_loss(node, instance[1], hp).total_node
        return fn

    def prefix_fn(config, instance):
        frozen = [-0.3 - 0.2 * t for t in range(len(instance[1]))]
        def fn(tape, store):
            value, _ = obj.prefix_objective_reference(
                tape, SequenceModel(config, store), instance[0], instance[1],
                hp, trie=None, config=DecodeConfig(beam_width=2),
                frozen_thresholds=frozen)
            return value
        return fn

    # Pure-margin losses are exact logit differences along most output-head
    # coordinates: their true head gradient there is identically zero and a
    # finite difference can only measure rounding noise against the formula's
    # 1e-8 floor. The sweeps therefore differentiate the non-head parameters
    # (every coordinate informative, flat ones exactly flat) and the head
    # gradient is verified against its closed form at 1e-10 instead.
    def reg_wrap(tape, store, head, config, instance, negative):
        dists, _ = _headless_margin_dists(tape, store, *head, config, instance)
        reg, _ = obj.beam_aware_regularizer(dists, instance[1], hp)
        return reg

    def dpo_wrap(tape, store, head, config, instance, negative):
        pos, _ = _headless_margin_dists(tape, store, *head, config, instance)
        neg, _ = _headless_margin_dists(tape, store, *head, config, negative)
        return obj.dpo_style_regularizer((pos, instance[1], None),
                                         [(neg, negative[1], None)], hp)

    def _informative(fn, partial):
        """Differences can only measure gradients above the rounding noise
        floor; require every nonzero analytic coordinate to clear it."""
        partial.zero_grads()
        ad.backward(fn(ad.Tape(), partial))
        for name in partial.names():
            g = np.abs(partial.grad(name).reshape(-1))
            nonzero = g[g > 0]
            if nonzero.size and nonzero.min() < 1e-6:
                return False
        return True

    def headless_sweep(wrap, needs_negative=False, n=50):
        checked = 0
        attempts = 0
        while checked < n:
            attempts += 1
            assert attempts < 60 * n, "too many degenerate draws"
            config, model, instance = _loss_world(rng)
            negative = None
            if needs_negative:
                t_len = int(rng.integers(1, 4))
                negative = ([BOS_ID] + [int(t) for t in rng.integers(4, 7, size=2)],
                            [int(t) for t in rng.integers(4, 7, size=t_len)] + [EOS_ID])
            probes = [instance] + ([negative] if negative else [])
            if _rectifier_margin(model, probes) < 5e-4:
                continue
            if any(_boundary_gap(model.batch_forward(ad.Tape(), [p])[0].value, 2)
                   < 5e-3 for p in probes):
                continue
            partial, head_w, head_b = _split_head(model)

            def fn(tape, store):
                return wrap(tape, store, (head_w, head_b), config, instance, negative)

            if not _informative(fn, partial):
                continue
            err = ad.grad_check(fn, partial, step=1e-5)
            assert err < 1e-4, f"instance {checked}: rel error {err:.2e}"
            _head_gradient_oracle(model, instance, hp)
            checked += 1

    _fd_sweep(rng, sft_fn, step=1e-5)
    _fd_sweep(rng, bear_fn, step=1e-5, needs_gap=True)
    _fd_sweep(rng, prefix_fn, step=1e-5)
    headless_sweep(reg_wrap)
    headless_sweep(dpo_wrap, needs_negative=True)
    _ok(3, f"primitives and all five losses pass 50-instance finite-difference "
           f"sweeps at 1e-4, head gradients match their closed form "
           f"({time.perf_counter() - t0:.0f}s)")


# -- criterion 5: surrogate limit (footnote behaviour) ------------------------


def test_criterion_05_surrogate_limit():
    deltas = np.concatenate([np.linspace(-30.0, -0.1, 5000),
                             np.linspace(0.1, 30.0, 5000)])
    sig = obj.sigma_xi(deltas, 0.01)
    indicator = (deltas > 0).astype(float)
    worst = np.abs(sig - indicator).max()
    assert worst <= 1e-4
    assert obj.sigma_xi(0.0, 0.01) == 0.5
    assert abs(math.log(obj.sigma_xi(0.0, 1.0)) - math.log(0.5)) <= 1e-12
    _ok(5, f"sigma at xi=0.01 within {worst:.1e} of the indicator on a "
           f"10^4-point grid; log sigma(0) exact")


# -- criterion 6: metric hand cases -------------------------------------------


def test_criterion_06_metric_hand_cases():
    assert ndcg_at_k([1, 2, 7, 3, 4], 7, 5) == 0.5
    assert ndcg_at_k([7], 7, 5) == 1.0
    assert ndcg_at_k([1, 2, 3, 4, 5], 7, 5) == 0.0
    assert hit_ratio_at_k([7, 1], 7, 1) == 1
    assert hit_ratio_at_k([1, 2, 7], 7, 3) == 1
    assert hit_ratio_at_k([1, 2, 3, 7], 7, 3) == 0
    # wide beam: nothing can be pruned
    rng = np.random.default_rng(66)
    vocab, items, trie, model = random_world(rng, 12)
    prompt = (BOS_ID,)
    finals, trace = beam_search(model, prompt, trie,
                                DecodeConfig(beam_width=len(items)))
    from bearlab.decode import classify_positive
    from bearlab.metrics import EvalResult
    ranking = exhaustive_rank(model, prompt, items)
    results = []
    for item in items:
        ex_rank = next(i for i, (iid, _) in enumerate(ranking, 1)
                       if iid == item.item_id)
        beam_rank = next(i for i, h in enumerate(finals, 1)
                         if h.item_id == item.item_id)
        cause, _ = classify_positive(trace, item.token_ids, trie)
        results.append(EvalResult(user_id=item.item_id, positive_item=item.item_id,
                                  exhaustive_rank=ex_rank, beam_rank=beam_rank,
                                  cause=cause, pruned_step=None,
                                  model_digest="d"))
    for k in (5, 10):
        rate, count = pruning_rate_at_k(results, k)
        assert rate == 0.0 and count == min(k, len(items))
    _ok(6, "NDCG@5 = 0.5 at rank 3, hit-ratio boundaries, PR = 0 at full beam")


# -- criteria 7-9: the directional experiment ---------------------------------


TOY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def toy_compare(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("toy"))
    config = exp.ExperimentConfig(dataset=datamod.SyntheticConfig(),
                                  seeds=TOY_SEEDS, out_dir=out,
                                  methods=(
                                      ("sft", "sft", exp.HyperParams()),
                                      ("bear", "bear", exp.HyperParams()),
                                      ("prefix-ref", "prefix-ref", exp.HyperParams()),
                                  ))
    exp.generate_data(config, out)
    bundle = exp.prepare_dataset(config, out)
    # one worker: the timing claims are about a single laptop-class core
    saved = os.environ.get("BEARLAB_THREADS")
    os.environ["BEARLAB_THREADS"] = "1"
    try:
        t0 = time.perf_counter()
        reports, rows = exp.compare(config, bundle, out_dir=out)
        wall = time.perf_counter() - t0
    finally:
        if saved is None:
            os.environ.pop("BEARLAB_THREADS", None)
        else:
            os.environ["BEARLAB_THREADS"] = saved
    return config, reports, rows, wall, out


def _run_wall_seconds(report):
    t = report.timing
    return (sum(t["epoch_train_seconds"]) + sum(t["epoch_val_seconds"])
            + t["eval_seconds"])


def test_criterion_07_bear_prunes_less_than_sft(toy_compare):
    config, reports, _rows, _wall, _out = toy_compare
    sft_pr = [reports[("sft", s)].pruning_rate[10] for s in TOY_SEEDS]
    bear_pr = [reports[("bear", s)].pruning_rate[10] for s in TOY_SEEDS]
    assert all(v is not None for v in sft_pr + bear_pr)
    sft_mean, bear_mean = float(np.mean(sft_pr)), float(np.mean(bear_pr))
    assert bear_mean <= 0.9 * sft_mean, (sft_pr, bear_pr)
    sft_ndcg = float(np.mean([reports[("sft", s)].ndcg[10] for s in TOY_SEEDS]))
    bear_ndcg = float(np.mean([reports[("bear", s)].ndcg[10] for s in TOY_SEEDS]))
    assert bear_ndcg >= sft_ndcg, (sft_ndcg, bear_ndcg)
    budget = sum(_run_wall_seconds(reports[(m, s)])
                 for m in ("sft", "bear") for s in TOY_SEEDS)
    assert budget < 600.0
    for m in ("sft", "bear"):
        for s in TOY_SEEDS:  # 200 test instances, one core
            assert reports[(m, s)].timing["eval_seconds"] < 60.0
    _ok(7, f"mean PR@10 {sft_mean:.3f} (sft) -> {bear_mean:.3f} (bear), "
           f"{100 * (1 - bear_mean / sft_mean):.0f}% relative drop; "
           f"NDCG@10 {sft_ndcg:.4f} -> {bear_ndcg:.4f}; "
           f"sft+bear wall {budget:.0f}s < 600s")


def test_criterion_08_epoch_time_ordering(toy_compare):
    config, reports, _rows, _wall, _out = toy_compare
    epoch = {m: float(np.mean([reports[(m, s)].timing["epoch_train_seconds_mean"]
                               for s in TOY_SEEDS]))
             for m in ("sft", "bear", "prefix-ref")}
    assert epoch["bear"] <= 1.3 * epoch["sft"], epoch
    assert epoch["prefix-ref"] >= 1.5 * epoch["sft"], epoch
    _ok(8, f"epoch seconds sft {epoch['sft']:.2f}, bear {epoch['bear']:.2f} "
           f"({epoch['bear'] / epoch['sft']:.2f}x <= 1.3x), prefix-ref "
           f"{epoch['prefix-ref']:.2f} ({epoch['prefix-ref'] / epoch['sft']:.2f}x >= 1.5x)")


def test_criterion_09_beam_aware_objectives_dominate_sft(toy_compare):
    config, reports, rows, _wall, out = toy_compare
    for method in ("bear", "prefix-ref"):
        wins = sum(1 for s in TOY_SEEDS
                   if reports[(method, s)].ndcg[10] > reports[("sft", s)].ndcg[10])
        assert wins >= 2, (method, wins)
    assert os.path.exists(os.path.join(out, "compare", "comparison.csv"))
    assert os.path.exists(os.path.join(out, "compare", "comparison.json"))
    mean_rows = [r for r in rows if r["seed"] == "mean"]
    assert {r["method"] for r in mean_rows} == {"sft", "bear", "prefix-ref"}
    _ok(9, "bear and prefix-ref beat sft on NDCG@10 in >= 2 of 3 seeds; "
           "comparison files written")


# -- criterion 4: degenerate lambda -------------------------------------------


def test_criterion_04_lambda_zero_bear_is_sft_bit_exact(toy_compare):
    config, _reports, _rows, _wall, out = toy_compare
    bundle = exp.load_bundle(config, out)
    sft_ckpt, _ = exp.train(config, bundle, seed=0, objective="sft")
    zero = exp.HyperParams(lam=0.0, xi=config.hyper.xi,
                           beam_width=config.hyper.beam_width)
    bear_ckpt, _ = exp.train(config, bundle, seed=0, objective="bear", hyper=zero)
    assert [h["train_loss"] for h in sft_ckpt.history] == \
           [h["train_loss"] for h in bear_ckpt.history]
    assert [h["val_ndcg10"] for h in sft_ckpt.history] == \
           [h["val_ndcg10"] for h in bear_ckpt.history]
    assert sft_ckpt.store.digest() == bear_ckpt.store.digest()
    _ok(4, "lambda=0 bear training reproduces sft bit-exactly "
           "(loss curve, validation curve, parameters)")


# -- criterion 10: determinism and persistence --------------------------------


def _strip_timing(payload: dict) -> dict:
    payload = dict(payload)
    payload.pop("timing", None)
    return payload


def test_criterion_10_determinism_and_round_trip(tmp_path):
    payload = {
        "dataset": {"catalog_size": 30, "users": 80, "seq_length": 11, "seed": 6,
                    "prefix_groups": 4, "genres": 2, "title_length": [3, 5]},
        "model": {"embed_dim": 8, "hidden_dim": 8},
        "hyper": {"lam": 0.25, "xi": 1.0, "beam_width": 5},
        "decode": {"beam_width": 5},
        "objective": "bear",
        "epochs": 2, "batch_size": 16, "learning_rate": 0.3,
        "k_list": [5, 10], "seeds": [3],
    }
    outputs = []
    for run in (0, 1):
        out = tmp_path / f"run{run}"
        payload["out_dir"] = str(out)
        config_path = tmp_path / f"config{run}.json"
        config_path.write_text(json.dumps(payload), encoding="utf-8")
        for command in ("gen-data", "prepare", "train", "evaluate"):
            assert cli_main([command, "--config", str(config_path)]) == 0
        run_dir = out / "runs" / "bear-seed3"
        report = json.loads((run_dir / "report.json").read_text())
        csv_lines = (run_dir / "report.csv").read_text().splitlines()
        csv_no_time = [",".join(line.split(",")[:-1]) for line in csv_lines]
        outputs.append({
            "report": _strip_timing(report),
            "csv": csv_no_time,
            "params": (run_dir / "checkpoint" / "params.bin").read_bytes(),
            "state": (run_dir / "checkpoint" / "training_state.json").read_bytes(),
            "catalog": (out / "catalog.csv").read_bytes(),
            "instances": (out / "dataset" / "instances.json").read_bytes(),
        })
    assert outputs[0] == outputs[1]

    # checkpoint round trip reproduces the recorded validation metric exactly
    out = tmp_path / "run0"
    payload["out_dir"] = str(out)
    config = exp.config_from_json(payload)
    bundle = exp.load_bundle(config, str(out))
    ckpt = exp.Checkpoint.load(str(out / "runs" / "bear-seed3" / "checkpoint"))
    recomputed = exp.validation_ndcg10(ckpt.model(), bundle, config.decode,
                                       bundle.split("val"))
    assert recomputed == ckpt.best_val_ndcg()
    _ok(10, "two full pipeline runs byte-identical (timing aside); checkpoint "
            "round-trip reproduces validation NDCG@10 exactly")
