"""Trainer: Adam semantics, early stopping, freeze contracts, checkpoint
round trips, and deterministic/resumable trajectories."""

import copy

import numpy as np
import pytest

from pinf import diffcore as dc
from pinf.errors import ChecksumError, ContractError, FormatError, InputError, UsageError
from pinf.model import VClassifier, init_params
from pinf.trainer import (
    AdamState,
    Checkpoint,
    DatasetSplit,
    EarlyStopper,
    FreezePlan,
    TrainConfig,
    adam_step,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    collect_group_grads,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

from conftest import TINY_MODEL, make_tiny_split


def tiny_params():
    return init_params(TINY_MODEL, seed=5)


def grads_like(params, value=0.0):
    return {
        g: {n: np.full_like(t.data, value) for n, t in params[g].tensors.items()}
        for g in params.groups
        if not params[g].frozen
    }


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        params = tiny_params()
        params.apply_freeze({g: g != "ch2" for g in params.groups})
        state = AdamState.fresh(params)
        cfg = TrainConfig(seed=0, learning_rate=1e-3)
        before = {n: t.data.copy() for n, t in params["ch2"].tensors.items()}
        grads = {"ch2": {n: np.ones_like(t.data) for n, t in params["ch2"].tensors.items()}}
        grads.update({g: {} for g in params.groups if g != "ch2" and not params[g].frozen})
        adam_step(params, grads, state, cfg)
        for n, t in params["ch2"].tensors.items():
            delta = np.abs(before[n] - t.data)
            np.testing.assert_allclose(delta, 1e-3, rtol=1e-6)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = tiny_params()
        state = AdamState.fresh(params)
        cfg = TrainConfig(seed=0)
        before = {g: params.group_blob(g) for g in params.groups}
        adam_step(params, grads_like(params, 0.0), state, cfg)
        after = {g: params.group_blob(g) for g in params.groups}
        assert before == after

    def test_frozen_group_bytes_untouched(self):
        params = tiny_params()
        params.apply_freeze({"encoder": True})
        state = AdamState.fresh(params)
        cfg = TrainConfig(seed=0)
        before = params.group_blob("encoder")
        moments_before = {n: a.copy() for n, a in state.m["encoder"].items()}
        adam_step(params, grads_like(params, 0.5), state, cfg)
        assert params.group_blob("encoder") == before
        assert state.step["encoder"] == 0
        for n, a in state.m["encoder"].items():
            assert np.array_equal(a, moments_before[n])

    def test_gradient_for_frozen_group_rejected(self):
        params = tiny_params()
        params.apply_freeze({"encoder": True})
        state = AdamState.fresh(params)
        grads = grads_like(params, 0.1)
        grads["encoder"] = {n: np.zeros_like(t.data) for n, t in params["encoder"].tensors.items()}
        with pytest.raises(ContractError):
            adam_step(params, grads, state, TrainConfig(seed=0))

    def test_missing_gradients_for_unfrozen_group_rejected(self):
        params = tiny_params()
        state = AdamState.fresh(params)
        grads = grads_like(params, 0.1)
        del grads["ch2"]
        with pytest.raises(ContractError):
            adam_step(params, grads, state, TrainConfig(seed=0))


class TestCollectGroupGrads:
    def test_frozen_groups_get_zero_length_entries(self, tiny_split):
        params = tiny_params()
        params.apply_freeze(FreezePlan.stage2_default().as_dict())
        model = VClassifier(TINY_MODEL, params)
        rng = np.random.default_rng(0)
        x = tiny_split.images[:4]
        y = tiny_split.labels[:4]
        c = tiny_split.images[:4]
        loss, _ = model.loss_sub(x, y, c, 0.1, rng)
        grads = collect_group_grads(params, dc.backward(loss))
        for g in ("encoder", "post_mlp1", "ch1"):
            assert grads[g] == {}
        for g in ("post_mlp2", "ch2", "prior_net", "annotation_encoder"):
            assert set(grads[g]) == set(params[g].tensors)


class TestEarlyStopper:
    def test_scripted_sequence_accrues_two_stalls(self):
        stopper = EarlyStopper(rel_tolerance=0.01, patience=3)
        signals = [stopper.update(m) for m in (0.70, 0.71, 0.712, 0.713)]
        assert signals == [False, False, False, False]
        assert stopper.stall == 2
        # the third sub-tolerance epoch triggers the stop
        assert stopper.update(0.7135) is True

    def test_improvement_resets_stall(self):
        stopper = EarlyStopper(rel_tolerance=0.01, patience=2)
        for m in (0.5, 0.502, 0.52):
            assert stopper.update(m) is False
        assert stopper.stall == 0

    def test_best_tracks_running_max(self):
        stopper = EarlyStopper(rel_tolerance=0.01, patience=5)
        for m in (0.70, 0.71, 0.712):
            stopper.update(m)
        assert stopper.best == 0.712


class TestDatasetSplit:
    def test_rejects_test_leakage(self):
        with pytest.raises(InputError):
            DatasetSplit(
                images=np.zeros((4, 1, 8, 8)),
                labels=np.zeros((4, 1)),
                train_ids=[0, 1],
                val_ids=[1, 2],
                test_ids=[3],
                annotated_ids=[0],
            )

    def test_rejects_annotated_outside_train(self):
        with pytest.raises(InputError):
            DatasetSplit(
                images=np.zeros((4, 1, 8, 8)),
                labels=np.zeros((4, 1)),
                train_ids=[0, 1],
                val_ids=[2],
                test_ids=[3],
                annotated_ids=[2],
            )

    def test_annotation_map_sources(self, tiny_split):
        from pinf.rasterizer import RasterConfig

        rc = RasterConfig()
        gaze = tiny_split.annotation_map(0, "gaze", rc)
        bbox = tiny_split.annotation_map(0, "bbox", rc)
        assert gaze.shape == (16, 16) and bbox.shape == (16, 16)
        with pytest.raises(InputError):
            tiny_split.annotation_map(0, "nope", rc)


class TestCheckpointFormat:
    def _roundtrip_ckpt(self, tiny_split):
        cfg = TrainConfig(seed=3, max_epochs=1, batch_size=8)
        return train_stage1(tiny_split, cfg, TINY_MODEL)

    def test_save_load_save_byte_identical(self, tiny_split, tmp_path):
        ckpt = self._roundtrip_ckpt(tiny_split)
        p1, p2 = tmp_path / "a.pinf", tmp_path / "b.pinf"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_state_is_exact(self, tiny_split, tmp_path):
        ckpt = self._roundtrip_ckpt(tiny_split)
        path = tmp_path / "c.pinf"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        for g in ckpt.params.groups:
            assert ckpt.params.group_blob(g) == back.params.group_blob(g)
            assert ckpt.params[g].frozen == back.params[g].frozen
        assert back.rng_state == ckpt.rng_state
        assert back.epoch == ckpt.epoch and back.stage == 1

    def test_truncated_file_checksum_error(self, tiny_split, tmp_path):
        ckpt = self._roundtrip_ckpt(tiny_split)
        path = tmp_path / "t.pinf"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_corrupt_byte_checksum_error(self, tiny_split, tmp_path):
        ckpt = self._roundtrip_ckpt(tiny_split)
        path = tmp_path / "t.pinf"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.pinf"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tiny_split, tmp_path):
        import struct
        import zlib

        ckpt = self._roundtrip_ckpt(tiny_split)
        blob = bytearray(checkpoint_to_bytes(ckpt))
        blob[4:8] = struct.pack("<I", 99)
        body = bytes(blob[:-4])
        blob[-4:] = struct.pack("<I", zlib.crc32(body))
        with pytest.raises(FormatError, match="version"):
            checkpoint_from_bytes(bytes(blob))

    def test_f32_records_present_in_layout(self, tiny_split):
        ckpt = self._roundtrip_ckpt(tiny_split)
        blob = checkpoint_to_bytes(ckpt)
        assert blob[:4] == b"PINF"
        assert b"encoder/conv0_w" in blob
        assert b"ch2/w2" in blob


class TestTraining:
    def test_max_epochs_zero_returns_initialization(self, tiny_split):
        cfg = TrainConfig(seed=11, max_epochs=0)
        ckpt = train_stage1(tiny_split, cfg, TINY_MODEL)
        fresh = init_params(TINY_MODEL, cfg.seed)
        for g in fresh.groups:
            assert ckpt.params.group_blob(g) == fresh.group_blob(g)
        assert ckpt.epoch == 0

    def test_same_seed_bit_identical_checkpoints(self, tiny_split):
        cfg = TrainConfig(seed=4, max_epochs=2, batch_size=8)
        a = train_stage1(tiny_split, cfg, TINY_MODEL)
        b = train_stage1(tiny_split, cfg, TINY_MODEL)
        assert checkpoint_to_bytes(a) == checkpoint_to_bytes(b)

    def test_metrics_csv_byte_identical_across_runs(self, tiny_split, tmp_path):
        cfg = TrainConfig(seed=4, max_epochs=2, batch_size=8)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        train_stage1(tiny_split, cfg, TINY_MODEL, metrics_path=pa)
        train_stage1(tiny_split, cfg, TINY_MODEL, metrics_path=pb)
        assert pa.read_bytes() == pb.read_bytes()
        header = pa.read_text().splitlines()[0]
        assert header == "epoch,split,loss,nll,kl,auc,f1"

    def test_loss_decreases_over_first_steps_statistically(self, tiny_split):
        # sanity across 5 seeds: mean training loss of the first epoch
        # exceeds that of the third epoch at lr 1e-3
        wins = 0
        for seed in range(5):
            cfg = TrainConfig(seed=seed, max_epochs=3, batch_size=8, patience=10)
            import tempfile, os

            with tempfile.TemporaryDirectory() as d:
                path = os.path.join(d, "m.csv")
                train_stage1(tiny_split, cfg, TINY_MODEL, metrics_path=path)
                rows = [r.split(",") for r in open(path).read().splitlines()[1:]]
                train_losses = [float(r[2]) for r in rows if r[1] == "train"]
            if train_losses[-1] < train_losses[0]:
                wins += 1
        assert wins >= 4

    def test_resume_matches_uninterrupted_run(self, tiny_split, tmp_path):
        model_cfg = TINY_MODEL
        straight = train_stage1(
            tiny_split, TrainConfig(seed=9, max_epochs=4, batch_size=8, patience=100),
            model_cfg, select="last",
        )
        half = train_stage1(
            tiny_split, TrainConfig(seed=9, max_epochs=2, batch_size=8, patience=100),
            model_cfg, select="last",
        )
        path = tmp_path / "half.pinf"
        save_checkpoint(half, path)
        resumed = train_stage1(
            tiny_split, TrainConfig(seed=9, max_epochs=4, batch_size=8, patience=100),
            model_cfg, resume=load_checkpoint(path), select="last",
        )
        assert checkpoint_to_bytes(resumed) == checkpoint_to_bytes(straight)

    def test_empty_training_set_rejected(self):
        split = DatasetSplit(
            images=np.zeros((3, 1, 16, 16)),
            labels=np.zeros((3, 2)),
            train_ids=[],
            val_ids=[0, 1],
            test_ids=[2],
            annotated_ids=[],
        )
        with pytest.raises(InputError):
            train_stage1(split, TrainConfig(seed=0, max_epochs=1), TINY_MODEL)


class TestStage2:
    @pytest.fixture
    def stage1_ckpt(self, tiny_split):
        return train_stage1(
            tiny_split, TrainConfig(seed=2, max_epochs=1, batch_size=8), TINY_MODEL
        )

    def test_requires_stage1_checkpoint(self, stage1_ckpt, tiny_split):
        cfg = TrainConfig(seed=2, max_epochs=1, batch_size=8)
        bad = stage1_ckpt.clone()
        bad.stage = 2
        with pytest.raises(UsageError):
            train_stage2(bad, tiny_split, cfg)

    def test_plan_must_release_something(self, stage1_ckpt, tiny_split):
        plan = FreezePlan(True, True, True, True, True, True, True)
        with pytest.raises(ContractError):
            train_stage2(stage1_ckpt, tiny_split, TrainConfig(seed=2, max_epochs=1), plan)

    def test_default_plan_freeze_contract_bytes(self, stage1_ckpt, tiny_split):
        cfg = TrainConfig(seed=2, max_epochs=3, batch_size=8, patience=50)
        ck2 = train_stage2(stage1_ckpt, tiny_split, cfg, select="last")
        assert ck2.stage == 2
        for g in ("encoder", "post_mlp1", "ch1"):
            assert ck2.params.group_blob(g) == stage1_ckpt.params.group_blob(g)
        for g in ("post_mlp2", "ch2"):
            assert ck2.params.group_blob(g) != stage1_ckpt.params.group_blob(g)

    def test_all_released_plan_accepted_and_trains_encoder(self, stage1_ckpt, tiny_split):
        cfg = TrainConfig(seed=2, max_epochs=2, batch_size=8, patience=50)
        ck2 = train_stage2(
            stage1_ckpt, tiny_split, cfg, plan=FreezePlan.all_released(), select="last"
        )
        assert ck2.params.group_blob("encoder") != stage1_ckpt.params.group_blob("encoder")

    def test_bbox_annotation_source(self, stage1_ckpt, tiny_split):
        cfg = TrainConfig(seed=2, max_epochs=1, batch_size=8)
        ck2 = train_stage2(stage1_ckpt, tiny_split, cfg, annotation_source="bbox")
        assert ck2.stage == 2

    def test_empty_annotated_subset_rejected(self, stage1_ckpt, tiny_split):
        split = copy.copy(tiny_split)
        split.annotated_ids = np.array([], dtype=np.int64)
        with pytest.raises(InputError):
            train_stage2(stage1_ckpt, split, TrainConfig(seed=2, max_epochs=1))

    def test_same_seed_stage2_bit_identical(self, stage1_ckpt, tiny_split):
        cfg = TrainConfig(seed=6, max_epochs=2, batch_size=8, patience=50)
        a = train_stage2(stage1_ckpt, tiny_split, cfg)
        b = train_stage2(stage1_ckpt, tiny_split, cfg)
        assert checkpoint_to_bytes(a) == checkpoint_to_bytes(b)
