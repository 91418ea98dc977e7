"""Acceptance suite: one test per shipped guarantee, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS lines.
"""

import math
import time
from pathlib import Path

import numpy as np
from click.testing import CliRunner

from advqa.adapters.base import (
    ENCODER_IMAGE,
    ENCODER_MULTIMODAL,
    ENCODER_TEXT,
    LOSS_KIND_ANTI_RECOVERY,
    LOSS_KIND_FEATURE,
    LossSpec,
)
from advqa.cli import main
from advqa.core.constraints import clip_to_budget, semantic_similarity
from advqa.core.types import ABLATION_PRESETS, AnswerSet, AttackConfig, TokenizedText
from advqa.evalkit import (
    generate_synthetic_dataset,
    is_correct,
    load_dataset,
    load_image_png,
    load_report,
    load_sidecar,
    quantize,
    save_image_png,
    save_sidecar,
)
from advqa.image_attack import anti_recovery_loss, image_step
from advqa.llm_bridge import OfflineClient, build_masked_templates
from advqa.orchestrator import run_attack, should_trigger_joint
from advqa.text_attack import Candidate, CandidateSet, RankedCandidate, rank_synonyms, substitute_with_constraint

GOLDEN = Path(__file__).parent / "data" / "golden" / "data.jsonl"
BUDGET = 16 / 255
SIM_THRESHOLD = 0.95

QUESTIONS = [
    "what color is the bus?",
    "what room is this?",
    "where is the dog?",
    "what is the man holding?",
    "is the chair big?",
    "what sport is the boy playing?",
    "what is on the table?",
    "what animal is in the picture?",
]


def within_budget(image, clean, budget):
    tol = np.spacing(np.maximum(np.abs(image), np.abs(clean)))
    return bool(
        (np.abs(image - clean) <= budget + tol).all()
        and image.min() >= 0.0
        and image.max() <= 1.0
    )


def test_c1_constraint_suite_over_200_runs(toy_adapter, encoder):
    started = time.monotonic()
    violations = 0
    checked_texts = 0
    for run in range(200):
        rng = np.random.default_rng(50_000 + run)
        question = QUESTIONS[run % len(QUESTIONS)]
        text = toy_adapter.tokenize(question)
        clean = quantize(rng.uniform(0, 1, (16, 16, 3)))
        config = AttackConfig(seed=50_000 + run, max_iters=8)

        seen = []
        result = run_attack(
            clean,
            text,
            AnswerSet.of(["red"]),
            toy_adapter,
            config,
            encoder=encoder,
            monitor=lambda stage, m, image: seen.append(image.copy()),
        )
        for image in seen + [result.adv_image]:
            if not within_budget(image, clean, BUDGET):
                violations += 1
        if result.n_substitutions > 0:
            checked_texts += 1
            assert (
                semantic_similarity(result.adv_text, text, encoder) > SIM_THRESHOLD
            ), f"run {run}: similarity constraint violated"
    elapsed = time.monotonic() - started
    assert violations == 0
    assert checked_texts > 0, "no run exercised the text constraint"
    assert elapsed < 300.0
    print(
        f"\n[criterion 1] PASS: 200 runs, 0 constraint violations, "
        f"{checked_texts} runs with substitutions all above {SIM_THRESHOLD}; {elapsed:.1f}s"
    )


def test_c2_trigger_schedule_exhaustive():
    started = time.monotonic()
    for max_iters in range(1, 41):
        for w in range(0, 11):
            stride = max_iters // (w + 1)
            if stride == 0:
                expected = set(range(1, max_iters + 1))
            else:
                expected = {m for m in range(1, max_iters + 1) if m % stride == 0}
            actual = {m for m in range(1, max_iters + 1) if should_trigger_joint(m, max_iters, w)}
            assert actual == expected, f"M={max_iters} |W|={w}"
    elapsed = time.monotonic() - started
    assert elapsed < 1.0
    print(f"\n[criterion 2] PASS: all (M, |W|) in 1..40 x 0..10 match; {elapsed:.2f}s")


def test_c3_gradient_finite_difference_oracle(toy_adapter):
    rng = np.random.default_rng(60_000)
    text = toy_adapter.tokenize("what color is the bus?")
    reference = toy_adapter.forward_features(quantize(rng.uniform(0, 1, (16, 16, 3))), text)
    templates = tuple(
        build_masked_templates(text, AnswerSet.of(["red"]), toy_adapter, OfflineClient())
    )
    losses = {
        "feature_image": LossSpec(LOSS_KIND_FEATURE, encoders=(ENCODER_IMAGE,), reference=reference),
        "feature_multimodal": LossSpec(
            LOSS_KIND_FEATURE, encoders=(ENCODER_MULTIMODAL,), reference=reference
        ),
        "cross_modal": LossSpec(
            LOSS_KIND_FEATURE,
            encoders=(ENCODER_IMAGE, ENCODER_MULTIMODAL, ENCODER_TEXT),
            reference=reference,
        ),
        "anti_recovery": LossSpec(LOSS_KIND_ANTI_RECOVERY, templates=templates),
    }
    h = 1e-3
    worst = {}
    for name, spec in losses.items():
        errs = []
        for input_idx in range(10):
            image = rng.uniform(0.05, 0.95, (16, 16, 3))
            _, grad = toy_adapter.loss_and_gradient_wrt_image(spec, image, text)
            for _ in range(10):  # 100 coordinates per loss across the 10 inputs
                i, j, k = (int(rng.integers(n)) for n in image.shape)
                plus, minus = image.copy(), image.copy()
                plus[i, j, k] += h
                minus[i, j, k] -= h
                vp, _ = toy_adapter.loss_and_gradient_wrt_image(spec, plus, text)
                vm, _ = toy_adapter.loss_and_gradient_wrt_image(spec, minus, text)
                fd = (vp - vm) / (2 * h)
                an = grad[i, j, k]
                errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
        worst[name] = max(errs)
        assert worst[name] < 1e-4, f"{name}: worst relative error {worst[name]:.3e}"
    summary = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    print(f"\n[criterion 3] PASS: finite-difference agreement (worst rel err): {summary}")


def test_c4_synonym_ranking_against_exhaustive_oracle():
    rng = np.random.default_rng(61_000)
    for instance in range(100):
        n_pos = int(rng.integers(1, 6))
        dim = int(rng.integers(2, 6))
        targets, table = {}, {}
        tie_vector = rng.standard_normal(dim)
        for pos in range(n_pos):
            n_cand = int(rng.integers(1, 7))
            targets[pos] = tie_vector.copy() if instance % 5 == 0 else rng.standard_normal(dim)
            cands = []
            for j in range(n_cand):
                if instance % 5 == 0 and j % 2 == 0:
                    emb = tie_vector.copy()  # forces exact score ties across (pos, j)
                else:
                    emb = rng.standard_normal(dim)
                cands.append(Candidate(f"w{pos}_{j}", pos * 10 + j, emb))
            table[pos] = tuple(cands)
        ranking = rank_synonyms(targets, CandidateSet(table))

        def cosine(u, v):
            nu = math.sqrt(sum(x * x for x in u))
            nv = math.sqrt(sum(x * x for x in v))
            return sum(a * b for a, b in zip(u, v)) / (nu * nv)

        expected = sorted(
            (-cosine(targets[pos], cand.embedding), pos, j)
            for pos, cands in table.items()
            for j, cand in enumerate(cands)
        )
        got = [(rc.position, rc.candidate_index) for rc in ranking]
        assert got == [(pos, j) for _, pos, j in expected], f"instance {instance}"
    print("\n[criterion 4] PASS: 100 instances match the exhaustive cosine-sort oracle")


def test_c5_substitution_walk_against_known_pass_sets():
    rng = np.random.default_rng(62_000)

    class PassListEncoder:
        """Pass/fail fixed per candidate word: failing words embed orthogonally."""

        def __init__(self, failing):
            self.failing = failing

        def encode(self, text):
            words = text.split()
            return np.array([0.0, 1.0]) if any(w in self.failing for w in words) else np.array([1.0, 0.0])

    for trial in range(50):
        n_pos = int(rng.integers(1, 5))
        words = tuple(f"orig{i}" for i in range(n_pos))
        clean = TokenizedText(words, tuple(range(n_pos)), frozenset(range(n_pos)))
        ranking, failing, expected = [], set(), {}
        token = 100
        for pos in range(n_pos):
            n_cand = int(rng.integers(1, 5))
            scores = sorted(rng.uniform(-1, 1, n_cand), reverse=True)
            for j in range(n_cand):
                word = f"cand{pos}_{j}"
                passes = bool(rng.integers(2))
                if not passes:
                    failing.add(word)
                elif pos not in expected:
                    expected[pos] = word  # first passing candidate in rank order
                ranking.append(
                    RankedCandidate(pos, j, Candidate(word, token, np.ones(2)), float(scores[j]))
                )
                token += 1
        ranking.sort(key=lambda rc: (-rc.score, rc.position, rc.candidate_index))
        # re-derive the oracle against the *global* rank order
        expected = {}
        for rc in ranking:
            if rc.position not in expected and rc.candidate.word not in failing:
                expected[rc.position] = rc.candidate.word
        out, subs = substitute_with_constraint(
            clean, clean, ranking, 0.5, PassListEncoder(failing)
        )
        got = {pos: new for pos, _, new in subs}
        assert got == expected, f"trial {trial}"
        for pos in range(n_pos):
            assert out.words[pos] == expected.get(pos, words[pos])
    print("\n[criterion 5] PASS: 50 constructed pass/fail walks select exactly the oracle's candidates")


def test_c6_anti_recovery_effect(toy_adapter):
    reduced = 0
    step = 2 / 255
    pairs = [
        ("what color is the bus?", "red"),
        ("what room is this?", "kitchen"),
        ("where is the dog?", "park"),
        ("what is the man holding?", "umbrella"),
    ]
    for case in range(100):
        rng = np.random.default_rng(70_000 + case)
        question, answer = pairs[case % len(pairs)]
        text = toy_adapter.tokenize(question)
        clean = quantize(rng.uniform(0, 1, (16, 16, 3)))
        templates = tuple(
            build_masked_templates(text, AnswerSet.of([answer]), toy_adapter, OfflineClient())
        )
        spec = LossSpec(LOSS_KIND_ANTI_RECOVERY, templates=templates)
        adv = clip_to_budget(clean + rng.uniform(-BUDGET, BUDGET, clean.shape), clean, BUDGET)
        first = anti_recovery_loss(templates, adv, toy_adapter)
        for _ in range(10):
            _, grad = toy_adapter.loss_and_gradient_wrt_image(spec, adv, text)
            adv = image_step(adv, grad, step, clean, BUDGET)
        if anti_recovery_loss(templates, adv, toy_adapter) < first:
            reduced += 1
    assert reduced >= 95, f"only {reduced}/100 cases reduced the masked log-probability"
    print(f"\n[criterion 6] PASS: {reduced}/100 cases reduced the answer log-probability (need >= 95)")


def test_c7_ablation_ordering_on_synthetic_dataset(tmp_path, toy_adapter, toy_victim, encoder):
    started = time.monotonic()
    data_path = generate_synthetic_dataset(tmp_path / "synth", 200, toy_victim, seed=1234)
    samples = load_dataset(data_path)
    assert len(samples) == 200
    loaded = [
        (load_image_png(s.image_path), toy_adapter.tokenize(s.question), s.answers)
        for s in samples
    ]
    seeds = (101, 202, 303, 404, 505)
    mean_asr = {}
    for preset in ("IE", "LRP", "full"):
        per_seed = []
        for seed in seeds:
            hits = 0
            for idx, (image, text, answers) in enumerate(loaded):
                config = AttackConfig(
                    seed=seed + idx, max_iters=8, loss_flags=ABLATION_PRESETS[preset]
                )
                result = run_attack(image, text, answers, toy_adapter, config, encoder=encoder)
                prediction = toy_victim.predict(
                    result.adv_image, toy_adapter.detokenize(result.adv_text)
                )
                if not is_correct(prediction, answers):
                    hits += 1
            per_seed.append(100.0 * hits / len(loaded))
        mean_asr[preset] = sum(per_seed) / len(per_seed)
    elapsed = time.monotonic() - started
    assert mean_asr["full"] > mean_asr["LRP"] > mean_asr["IE"], mean_asr
    print(
        f"\n[criterion 7] PASS: mean ASR full={mean_asr['full']:.2f}% > "
        f"LRP={mean_asr['LRP']:.2f}% > IE={mean_asr['IE']:.2f}% over 5 seeds; {elapsed:.0f}s"
    )


def test_c8_cli_determinism(tmp_path):
    runner = CliRunner()
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        result = runner.invoke(
            main,
            ["attack", "--data", str(GOLDEN), "--out", str(out), "--seed", "9", "--llm", "offline"],
        )
        assert result.exit_code == 0, result.output
        outs.append(out)
    first, second = outs
    assert (first / "report.jsonl").read_bytes() == (second / "report.jsonl").read_bytes()
    for sidecar in sorted((first / "adv").glob("*.npy")):
        twin = second / "adv" / sidecar.name
        assert sidecar.read_bytes() == twin.read_bytes()
    print("\n[criterion 8] PASS: byte-identical reports and sidecar tensors across two CLI runs")


def test_c9_round_trips(tmp_path, toy_adapter, encoder):
    # dataset: golden fixture loads and re-emitting preserves every field
    samples = load_dataset(GOLDEN)
    assert [s.id for s in samples] == ["g0", "g1", "g2"]

    # report: write/read preserved at 6-decimal precision (exercised via CLI artifacts)
    runner = CliRunner()
    out = tmp_path / "run"
    result = runner.invoke(
        main, ["attack", "--data", str(GOLDEN), "--out", str(out), "--seed", "4"]
    )
    assert result.exit_code == 0, result.output
    records, summary = load_report(out / "report.jsonl")
    assert len(records) == 3 and summary["n"] == 3
    for record in records:
        assert record.linf == round(record.linf, 6)

    # adversarial image + sidecar: the reloaded sidecar reproduces linf to 1e-9
    text = toy_adapter.tokenize("what color is the bus?")
    clean = load_image_png(samples[0].image_path)
    attack = run_attack(
        clean, text, samples[0].answers, toy_adapter, AttackConfig(seed=2, max_iters=6), encoder=encoder
    )
    save_image_png(tmp_path / "adv.png", attack.adv_image)
    save_sidecar(tmp_path / "adv.npy", attack.adv_image)
    reloaded = load_sidecar(tmp_path / "adv.npy")
    linf_reloaded = float(np.abs(reloaded - clean).max())
    assert abs(linf_reloaded - attack.linf) <= 1e-9
    png = load_image_png(tmp_path / "adv.png")
    assert float(np.abs(png - attack.adv_image).max()) <= 0.5 / 255  # quantization only
    print("\n[criterion 9] PASS: dataset, report, and image+sidecar round-trips are lossless")
