from __future__ import annotations

import numpy as np
import pytest

import evoadapt.downstream as downstream
from evoadapt import errors, seeds, store
from evoadapt.adaptation import HyperParams
from evoadapt.downstream import (
    AlgorithmPair,
    HpoSpace,
    domain_generalization_eval,
    evaluate_downstream,
    hybrid_transfer_dataset,
    optimize_hyperparams,
)
from evoadapt.fabric import ExecutionFabric, FabricConfig, TaskRef
from evoadapt.store import SynthSpec, synth_dataset, write_dataset

GDA_PAIR = AlgorithmPair(lg_code=seeds.GDA_LOGITS_CODE, label="gda")
APE_PAIR = AlgorithmPair(lg_code=seeds.APE_LOGITS_CODE, fs_code=seeds.APE_FS_CODE,
                         label="ape")


@pytest.fixture
def fabric_with_clean(tmp_path, zero_noise_synth):
    path = tmp_path / "clean.evlf"
    write_dataset(zero_noise_synth, path)
    with ExecutionFabric(FabricConfig(backend="native")) as fabric:
        dsid = fabric.register_dataset(path)
        yield fabric, dsid


@pytest.fixture
def fabric_with_noisy(tmp_path, small_synth):
    path = tmp_path / "noisy.evlf"
    write_dataset(small_synth, path)
    with ExecutionFabric(FabricConfig(backend="native")) as fabric:
        dsid = fabric.register_dataset(path)
        yield fabric, dsid


class TestOptimize:
    def test_degenerate_space_single_point(self, fabric_with_noisy):
        fabric, dsid = fabric_with_noisy
        point = HyperParams(topk=5, alpha0=1.0, alpha1=1.0, alpha2=1.0)
        space = HpoSpace(explicit_points=[point])
        result = optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0), space, 0)
        assert result.hp == point
        assert result.trials_run == 1

    def test_scripted_landscape_unique_optimum(self, fabric_with_noisy, monkeypatch):
        fabric, dsid = fabric_with_noisy
        points = [HyperParams(alpha0=a) for a in (0.1, 1.0, 10.0)]

        def landscape(fabric_, pair, ref, hp, split):
            return 1.0 - abs(np.log10(hp.alpha0)) * 0.3  # peak at alpha0 = 1

        monkeypatch.setattr(downstream, "pair_accuracy", landscape)
        result = optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0),
                                      HpoSpace(explicit_points=points), 0)
        # oracle: evaluate the scripted space exhaustively
        assert max(points, key=lambda hp: landscape(None, None, None, hp, "val")) \
            == result.hp
        assert result.hp.alpha0 == 1.0

    def test_same_seed_same_trials(self, fabric_with_noisy, monkeypatch):
        fabric, dsid = fabric_with_noisy
        seen: list[list[HyperParams]] = []

        def recorder(fabric_, pair, ref, hp, split):
            seen[-1].append(hp)
            return 0.5

        monkeypatch.setattr(downstream, "pair_accuracy", recorder)
        space = HpoSpace(trials=20)
        for _ in range(2):
            seen.append([])
            optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0), space, 31)
        assert seen[0] == seen[1]

    def test_more_trials_never_worse(self, fabric_with_noisy, monkeypatch):
        fabric, dsid = fabric_with_noisy

        def landscape(fabric_, pair, ref, hp, split):
            return 1.0 / (1.0 + abs(np.log(hp.alpha0) - 1.3) + 0.1 * hp.topk)

        monkeypatch.setattr(downstream, "pair_accuracy", landscape)
        accs = []
        for trials in (10, 40, 160):
            result = optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0),
                                          HpoSpace(trials=trials), seed=5)
            accs.append(result.val_accuracy)
        assert accs[0] <= accs[1] <= accs[2]

    def test_failed_trials_skipped_and_counted(self, fabric_with_noisy, monkeypatch):
        fabric, dsid = fabric_with_noisy
        calls = {"n": 0}

        def flaky(fabric_, pair, ref, hp, split):
            calls["n"] += 1
            if calls["n"] % 2 == 1:
                raise errors.CandidateError("boom")
            return 0.4

        monkeypatch.setattr(downstream, "pair_accuracy", flaky)
        result = optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0),
                                      HpoSpace(trials=10), seed=1)
        assert result.trials_failed == 5
        assert result.val_accuracy == 0.4

    def test_all_fail_raises(self, fabric_with_noisy, monkeypatch):
        fabric, dsid = fabric_with_noisy

        def dead(fabric_, pair, ref, hp, split):
            raise errors.CandidateError("boom")

        monkeypatch.setattr(downstream, "pair_accuracy", dead)
        with pytest.raises(errors.NoViableTrial):
            optimize_hyperparams(fabric, GDA_PAIR, TaskRef(dsid, 2, 0),
                                 HpoSpace(trials=4), seed=1)


class TestEvaluateDownstream:
    def test_separable_data_all_cells_one(self, fabric_with_clean):
        fabric, dsid = fabric_with_clean
        space = HpoSpace(trials=8, include_topk=False)
        report = evaluate_downstream(fabric, GDA_PAIR, [dsid], shots=(1, 2),
                                     seeds=(0, 1), space=space)
        assert all(c["test_accuracy"] == 1.0 for c in report.cells.values())
        assert report.average() == 1.0

    def test_row_count_is_shots_plus_average(self, fabric_with_clean):
        fabric, dsid = fabric_with_clean
        report = evaluate_downstream(fabric, GDA_PAIR, [dsid], shots=(1, 2, 4),
                                     seeds=(0,), space=HpoSpace(trials=3))
        rows = report.to_rows()
        assert len(rows) == 4
        assert rows[-1][0] == "average"
        csv = report.to_csv()
        assert csv.splitlines()[0] == "shot,accuracy"
        assert len(csv.splitlines()) == 5

    def test_rerun_identical(self, fabric_with_noisy):
        fabric, dsid = fabric_with_noisy
        space = HpoSpace(trials=6)
        kwargs = dict(dataset_ids=[dsid], shots=(1, 2), seeds=(0,), space=space)
        a = evaluate_downstream(fabric, APE_PAIR, **kwargs)
        b = evaluate_downstream(fabric, APE_PAIR, **kwargs)
        assert a.to_csv() == b.to_csv()
        assert a.to_json_summary() == b.to_json_summary()

    def test_averages_are_exact_means(self, fabric_with_noisy):
        fabric, dsid = fabric_with_noisy
        report = evaluate_downstream(fabric, GDA_PAIR, [dsid], shots=(1, 2),
                                     seeds=(0, 1), space=HpoSpace(trials=4))
        for shot in (1, 2):
            cells = [c["test_accuracy"] for (_, k, _), c in report.cells.items()
                     if k == shot]
            assert report.per_shot_mean()[shot] == float(np.mean(cells))
        assert report.average() == float(
            np.mean([report.per_shot_mean()[k] for k in (1, 2)])
        )

    def test_no_test_access_before_scoring(self, fabric_with_noisy):
        fabric, dsid = fabric_with_noisy
        events = []
        store.set_split_access_hook(
            lambda name, split: events.append((downstream.PHASE["current"], split))
        )
        try:
            evaluate_downstream(fabric, APE_PAIR, [dsid], shots=(1, 2), seeds=(0,),
                                space=HpoSpace(trials=5))
        finally:
            store.set_split_access_hook(None)
        assert events, "instrumentation saw no data access"
        assert not any(phase != "score" and split == "test"
                       for phase, split in events)
        assert any(phase == "score" and split == "test" for phase, split in events)


class TestDomainGeneralization:
    def test_identity_transfer(self, tmp_path, small_synth):
        with ExecutionFabric(FabricConfig(backend="native")) as fabric:
            accs = domain_generalization_eval(
                fabric, GDA_PAIR, small_synth, {"same": small_synth},
                HpoSpace(trials=5, include_topk=False), shots=4, seed=0,
                work_dir=str(tmp_path),
            )
        assert accs["same"] == accs["source"]

    def test_dimension_mismatch(self, small_synth):
        other = synth_dataset(SynthSpec(d=8, num_classes=4, train_per_class=6), 0)
        with pytest.raises(errors.DimensionMismatch):
            hybrid_transfer_dataset(small_synth, other)

    def test_monotone_shift_ladder(self, tmp_path):
        base = SynthSpec(d=12, num_classes=3, train_per_class=24, val_per_class=12,
                         test_per_class=48, sigma=0.25, tau=0.1, name="ladder")
        source = synth_dataset(base, seed=2)
        targets = {}
        for sigma in (0.5, 0.9, 1.6):
            spec = SynthSpec(**{**base.__dict__, "sigma": sigma})
            targets[f"s{sigma}"] = synth_dataset(spec, seed=2)  # same means, noisier
        with ExecutionFabric(FabricConfig(backend="native")) as fabric:
            accs = domain_generalization_eval(
                fabric, GDA_PAIR, source, targets,
                HpoSpace(trials=10, include_topk=False), shots=8, seed=0,
                work_dir=str(tmp_path),
            )
        ladder = [accs["source"], accs["s0.5"], accs["s0.9"], accs["s1.6"]]
        assert all(b <= a + 0.02 for a, b in zip(ladder, ladder[1:]))
        assert ladder[-1] < ladder[0]
