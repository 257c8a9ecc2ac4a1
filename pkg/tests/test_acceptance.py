"""Acceptance suite: one test per primary criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end smoke
trains the tiny backbone through the full pipeline (canonicalization,
seeded augmentation, mask channel) on a 260-image procedural dataset; the
remaining criteria are oracle and property checks.
"""

import itertools
import time

import numpy as np
import pytest
import torch

from cxrkit.augment import default_policy, derive_seed, sample_plan, apply_plan
from cxrkit.manifest import (
    NEGATIVE,
    POSITIVE,
    DatasetManifest,
    ScanRecord,
    apply_exclusions,
    load_manifest,
    patient_level_split,
    split_records,
)
from cxrkit.metrics import (
    BootstrapProtocol,
    bootstrap_cis,
    evaluate,
    percentile_interval,
    roc_curve,
)
from cxrkit.model import (
    ModelConfig,
    TrainingConfig,
    build_model,
    classification_loss,
    majority_vote,
    train,
)
from cxrkit.pipeline import InputPipeline, embed_records, scored_pairs
from cxrkit.preprocess import CANONICAL_SIZE, RawImage, resize_canonical
from cxrkit.retrieval import EmbeddingEntry, build_index, query_knn, neighbor_vote
from cxrkit.segmentation import new_mask_model, train_mask_model
from cxrkit.synthetic import SyntheticSpec, generate_dataset
from cxrkit.tsne import tsne


def verdict(name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """260-image two-class dataset, 200/60 patient-disjoint split, tiny
    backbone trained through the full pipeline. Wall time is recorded."""
    tmp = tmp_path_factory.mktemp("smoke")
    started = time.time()

    manifest_path = generate_dataset(
        tmp / "data", SyntheticSpec(n_patients=130, scans_per_patient=2, seed=7)
    )
    manifest, _ = apply_exclusions(load_manifest(manifest_path))
    split = patient_level_split(manifest, test_fraction=60 / 260, seed=11)
    train_records, test_records = split_records(manifest, split)

    mask_model = new_mask_model(base_channels=6, native_size=96, seed=0)
    train_mask_model(mask_model, n_images=32, steps=60, batch_size=8, seed=0)

    pipeline = InputPipeline(
        mask_model=mask_model, policy=default_policy(), cache_dir=tmp / "cache"
    )
    pipeline.warm_cache(manifest.records)

    training = TrainingConfig(
        initial_learning_rate=1e-3,
        lr_decay_per_epoch=0.95,
        l2_coefficient=1e-4,
        epochs=5,
        batch_size=16,
        global_seed=0,
    )
    model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
    model = train(model, train_records, training, pipeline)

    train_entries, _ = embed_records(model, train_records, pipeline, split="train")
    test_entries, test_scored = embed_records(model, test_records, pipeline, split="test")
    elapsed = time.time() - started

    return {
        "manifest": manifest,
        "split": split,
        "model": model,
        "pipeline": pipeline,
        "report": evaluate(scored_pairs(test_scored), threshold=0.5),
        "test_scored": test_scored,
        "train_entries": train_entries,
        "test_entries": test_entries,
        "elapsed": elapsed,
    }


class TestEndToEndSmoke:
    def test_split_is_exactly_200_60(self, smoke):
        ok = (
            len(smoke["split"].train_ids) == 200
            and len(smoke["split"].test_ids) == 60
        )
        verdict("end_to_end_smoke_split", ok,
                f"{len(smoke['split'].train_ids)}/{len(smoke['split'].test_ids)}")

    def test_accuracy_and_auc(self, smoke):
        report = smoke["report"]
        ok = report.accuracy >= 0.95 and report.roc.auc >= 0.98
        verdict(
            "end_to_end_smoke_quality",
            ok,
            f"accuracy={report.accuracy:.3f} auc_roc={report.roc.auc:.3f}",
        )

    def test_pr_auc_shape_target(self, smoke):
        ok = smoke["report"].pr.auc >= 0.95
        verdict("end_to_end_smoke_pr_auc", ok, f"auc_pr={smoke['report'].pr.auc:.3f}")

    def test_wall_time_budget(self, smoke):
        ok = smoke["elapsed"] <= 600.0
        verdict("end_to_end_smoke_time", ok, f"{smoke['elapsed']:.0f}s <= 600s")


class TestRocAucOracle:
    def test_trapezoid_equals_concordance(self):
        rng = np.random.default_rng(20)
        worst = 0.0
        for trial in range(100):
            n = int(rng.integers(2, 1001))
            scores = rng.random(n)
            if trial % 2 == 0:
                scores = np.round(scores, 2)  # inject ties
            truths = rng.random(n) < rng.uniform(0.2, 0.8)
            if truths.all() or not truths.any():
                truths[0] = ~truths[0]
            auc = roc_curve(list(zip(scores, truths))).auc
            pos, neg = scores[truths], scores[~truths]
            concordant = (pos[:, None] > neg[None, :]).sum()
            tied = (pos[:, None] == neg[None, :]).sum()
            oracle = (concordant + 0.5 * tied) / (len(pos) * len(neg))
            worst = max(worst, abs(auc - oracle))
        verdict("roc_auc_oracle", worst < 1e-9, f"max |diff| = {worst:.2e}")


class TestKnnExactness:
    def test_matches_brute_force_with_tie_break(self):
        rng = np.random.default_rng(21)
        failures = 0
        for _ in range(50):
            n = int(rng.integers(4, 501))
            entries = [
                EmbeddingEntry(
                    scan_id=f"v{i:04d}",
                    label="positive" if i % 2 else "negative",
                    vector=tuple(rng.integers(0, 5, 16).astype(float).tolist()),
                )
                for i in range(n)
            ]
            index = build_index(entries)
            query = rng.integers(0, 5, 16).astype(float)
            got = [(nb.distance, nb.scan_id) for nb in query_knn(index, query, k=4).neighbors]
            brute = sorted(
                (float(np.sqrt(((np.asarray(e.vector) - query) ** 2).sum())), e.scan_id)
                for e in entries
            )[:4]
            if got != brute:
                failures += 1
        verdict("knn_exactness", failures == 0, f"{failures} mismatches of 50")


class TestBilinearOracle:
    def test_resize_canonical_matches_per_pixel_formula(self):
        """Direct scalar evaluation on 8000 sampled output pixels/image."""
        rng = np.random.default_rng(22)
        worst = 0.0
        for _ in range(20):
            h, w = int(rng.integers(3, 40)), int(rng.integers(3, 40))
            px = rng.integers(0, 256, (h, w)).astype(np.float64)
            img = RawImage(pixels=px, bit_depth=8)
            out = resize_canonical(img)
            y0, x0, y1, x1 = out.pad_box

            square = max(h, w)
            out_h, out_w = y1 - y0, x1 - x0
            ii = rng.integers(0, CANONICAL_SIZE, 8000)
            jj = rng.integers(0, CANONICAL_SIZE, 8000)
            for i, j in zip(ii, jj):
                if y0 <= i < y1 and x0 <= j < x1:
                    ci, cj = i - y0, j - x0
                    sy = min(max((ci + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
                    sx = min(max((cj + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
                    fy0, fx0 = int(np.floor(sy)), int(np.floor(sx))
                    fy1, fx1 = min(fy0 + 1, h - 1), min(fx0 + 1, w - 1)
                    dy, dx = sy - fy0, sx - fx0
                    want = (
                        px[fy0, fx0] * (1 - dy) * (1 - dx)
                        + px[fy0, fx1] * (1 - dy) * dx
                        + px[fy1, fx0] * dy * (1 - dx)
                        + px[fy1, fx1] * dy * dx
                    ) / 255.0
                else:
                    want = 0.0
                worst = max(worst, abs(float(out.pixels[i, j]) - want))
        verdict("bilinear_resize_oracle", worst < 1e-6, f"max |diff| = {worst:.2e}")


class TestGradientCheck:
    def test_cross_entropy_plus_l2_matches_central_differences(self):
        torch.manual_seed(0)
        model = build_model(ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0)
        net = model.net.double()
        x = torch.randn(4, 3, 32, 32, dtype=torch.float64) * 0.2 + 0.3
        y = torch.tensor([0, 1, 1, 0])

        def loss_value():
            return classification_loss(net(x), y, net, 1e-2)

        loss_value().backward()
        rng = np.random.default_rng(23)
        analytic, numeric = [], []
        h = 1e-6
        for param in net.parameters():
            flat = param.detach().view(-1)
            grad = param.grad.detach().view(-1)
            for idx in rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False):
                original = flat[idx].item()
                flat[idx] = original + h
                plus = loss_value().item()
                flat[idx] = original - h
                minus = loss_value().item()
                flat[idx] = original
                analytic.append(grad[idx].item())
                numeric.append((plus - minus) / (2 * h))
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = float(np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic))
        verdict("gradient_check", rel < 1e-4, f"relative error = {rel:.2e}")


def protocol_manifest(n_patients=40):
    records = []
    for p in range(n_patients):
        for s, label in enumerate((POSITIVE, NEGATIVE)):
            records.append(
                ScanRecord(
                    scan_id=f"s{p:03d}_{s}", patient_id=f"p{p:03d}", label=label,
                    image_path="",
                )
            )
    return DatasetManifest(records=records)


def deterministic_runner(manifest, split):
    rng = np.random.default_rng(100 + split.seed)
    out = []
    for rec in manifest.records:
        if rec.scan_id in split.test_ids:
            base = 0.75 if rec.label == POSITIVE else 0.25
            out.append((float(np.clip(base + rng.normal(0, 0.2), 0, 1)), rec.is_positive))
    return out


class TestBootstrapProtocol:
    def test_shape_bounds_and_percentile_oracle(self):
        cis = bootstrap_cis(
            deterministic_runner,
            protocol_manifest(),
            BootstrapProtocol(10, 20),
            metrics=("accuracy", "sensitivity", "specificity"),
            test_fraction=0.15,
        )
        counts_ok = all(len(ci.values) == 200 for ci in cis)
        bounds_ok = all(0.0 <= ci.lower <= ci.upper <= 1.0 for ci in cis)

        values = np.arange(1, 201) / 200.0
        lo, hi = percentile_interval(values)
        spaced = np.sort(values)

        def oracle(q):
            pos = q * 199
            i = int(np.floor(pos))
            frac = pos - i
            return spaced[i] * (1 - frac) + spaced[min(i + 1, 199)] * frac

        pct_ok = abs(lo - oracle(0.025)) < 1e-12 and abs(hi - oracle(0.975)) < 1e-12
        verdict(
            "bootstrap_protocol",
            counts_ok and bounds_ok and pct_ok,
            f"counts={counts_ok} bounds={bounds_ok} percentiles={pct_ok}",
        )


class TestAugmentationReproducibility:
    def test_bitwise_across_runs_and_orderings(self, smoke):
        pipeline = smoke["pipeline"]
        policy = default_policy()
        records = smoke["manifest"].records[:12]
        canonical = {r.scan_id: pipeline.canonical_for(r) for r in records}

        def run(order):
            results = {}
            for r in order:
                seed = derive_seed(0, 2, r.scan_id)
                results[r.scan_id] = apply_plan(
                    canonical[r.scan_id], sample_plan(policy, seed)
                ).pixels
            return results

        forward = run(records)
        again = run(records)
        shuffled = run(records[::-1])
        ok = all(
            np.array_equal(forward[sid], again[sid])
            and np.array_equal(forward[sid], shuffled[sid])
            for sid in forward
        )
        verdict("augmentation_reproducibility", ok)


class TestPatientLeak:
    def test_no_leak_over_100_random_manifests(self):
        rng = np.random.default_rng(24)
        leaks = 0
        for trial in range(100):
            records = []
            idx = 0
            for p in range(int(rng.integers(2, 50))):
                for _ in range(int(rng.integers(1, 5))):
                    records.append(
                        ScanRecord(
                            scan_id=f"s{idx:05d}",
                            patient_id=f"p{p:04d}",
                            label=POSITIVE if rng.random() < 0.5 else NEGATIVE,
                            image_path="",
                        )
                    )
                    idx += 1
            manifest = DatasetManifest(records=records)
            split = patient_level_split(
                manifest, test_fraction=float(rng.uniform(0.05, 0.6)), seed=trial
            )
            by_id = manifest.by_id()
            train_p = {by_id[s].patient_id for s in split.train_ids}
            test_p = {by_id[s].patient_id for s in split.test_ids}
            leaks += len(train_p & test_p)
        verdict("patient_leak", leaks == 0, f"{leaks} leaked patients of 100 manifests")


class TestNeighborVoteCoupling:
    def test_vote_accuracy_tracks_classifier(self, smoke):
        index = build_index(smoke["train_entries"])
        correct = 0
        for entry in smoke["test_entries"]:
            result = query_knn(index, np.asarray(entry.vector), k=4)
            label, _ = neighbor_vote(result)
            correct += label == entry.label
        vote_acc = correct / len(smoke["test_entries"])
        clf_acc = smoke["report"].accuracy
        ok = abs(vote_acc - clf_acc) <= 0.10
        verdict(
            "neighbor_vote_coupling", ok,
            f"vote={vote_acc:.3f} classifier={clf_acc:.3f}",
        )


class TestTsne:
    def test_determinism_kl_silhouette_translation(self):
        from sklearn.metrics import silhouette_score

        rng = np.random.default_rng(25)
        a = rng.normal(0, 1, (100, 16))
        b = rng.normal(10, 1, (100, 16))
        vectors = np.vstack([a, b])
        labels = np.array([0] * 100 + [1] * 100)

        r1 = tsne(vectors, perplexity=30, iterations=500, seed=3)
        r2 = tsne(vectors, perplexity=30, iterations=500, seed=3)
        deterministic = np.array_equal(r1.embedding, r2.embedding)
        kl_ok = r1.final_kl < r1.initial_kl
        sil = float(silhouette_score(r1.embedding, labels))

        quantized = np.round(rng.random((45, 8)) * 65536) / 65536
        t1 = tsne(quantized, perplexity=8, iterations=250, seed=4)
        t2 = tsne(quantized + 3.0, perplexity=8, iterations=250, seed=4)
        translation_ok = np.array_equal(t1.embedding, t2.embedding)

        ok = deterministic and kl_ok and sil > 0.5 and translation_ok
        verdict(
            "tsne",
            ok,
            f"deterministic={deterministic} kl={r1.initial_kl:.3f}->{r1.final_kl:.3f} "
            f"silhouette={sil:.3f} translation={translation_ok}",
        )


class TestComparisonHarness:
    def test_table_structure_and_vote_oracle(self, tmp_path):
        from cxrkit.experiments import (
            ComparisonEntry,
            ExperimentSpec,
            comparison_table_text,
            run_comparison,
        )
        from cxrkit.segmentation import ConstantMaskModel
        from cxrkit.augment import AugmentationPolicy, PolicyEntry

        from conftest import patient_manifest, synthetic_loader

        spec = ExperimentSpec(
            manifest_path="in-memory",
            split_seed=2,
            models=[
                ComparisonEntry("desk_a", ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=0),
                ComparisonEntry("desk_b", ModelConfig("tiny_test_cnn", (64, 16, 2)), init_seed=1),
            ],
            training=TrainingConfig(
                initial_learning_rate=3e-3, lr_decay_per_epoch=1.0, l2_coefficient=1e-4,
                epochs=2, batch_size=6, global_seed=0,
            ),
            output_dir=tmp_path,
            test_fraction=0.25,
            policy=AugmentationPolicy(entries=(PolicyEntry("horizontal_flip", 0.5, None),)),
        )
        result = run_comparison(
            spec,
            mask_model=ConstantMaskModel(0.5),
            loader=synthetic_loader(),
            cache_dir=tmp_path / "cache",
            manifest=patient_manifest(n_patients=10),
        )
        table = comparison_table_text(result).strip().splitlines()
        structure_ok = (
            len(table) == 4
            and table[0].startswith("model")
            and "majority_vote" in table[-1]
            and all("of" in line for line in table[1:])
        )

        # Vote equals the per-image mode on every test scan.
        vote_matches = all(
            result.vote.labels[sid]
            == majority_vote([row.labels[sid] for row in result.rows])
            for sid in result.vote.labels
        )

        # Exhaustive oracles: all 2-voter patterns and all 2^5 patterns.
        def mode_or_positive(labels):
            pos = labels.count(POSITIVE)
            neg = labels.count(NEGATIVE)
            return POSITIVE if pos >= neg else NEGATIVE

        two_voter_ok = all(
            majority_vote(list(pattern)) == mode_or_positive(list(pattern))
            for pattern in itertools.product([POSITIVE, NEGATIVE], repeat=2)
        )
        five_voter_ok = all(
            majority_vote(list(pattern)) == mode_or_positive(list(pattern))
            for pattern in itertools.product([POSITIVE, NEGATIVE], repeat=5)
        )

        ok = structure_ok and vote_matches and two_voter_ok and five_voter_ok
        verdict(
            "comparison_harness",
            ok,
            f"structure={structure_ok} vote_matches={vote_matches} "
            f"patterns_2={two_voter_ok} patterns_32={five_voter_ok}",
        )
