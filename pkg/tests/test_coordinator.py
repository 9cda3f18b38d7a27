"""Coordinator tests: shard bytes must be a pure function of the job config,
independent of worker count and crash/resume history, with the manifest and
lease machinery covering recovery paths."""

import json
import os

import numpy as np
import pytest

from drforge.augment import replay
from drforge.coordinator import (
    CaptionerSpec,
    GenerationJob,
    TeacherSpec,
    _LeaseBox,
    generate_shard,
    plan,
    prepare,
    run,
    shard_filename,
    verify,
)
from drforge.manifest import Manifest, ShardEntry, config_conflicts
from drforge.shards import write_shard
from drforge.world import WorldConfig, build_world, sample_arrays, sample_id_for

JOB_WORLD = WorldConfig(num_classes=4, image_side=16, caption_dim=8, seed=3)


def make_job(output_dir, parallelism=1, **overrides):
    kwargs = dict(
        world=JOB_WORLD,
        teachers=(
            TeacherSpec("gen_a", d_k=6, n_fit_samples=128),
            TeacherSpec("gen_b", d_k=5, logit_scale=60.0, n_fit_samples=128),
        ),
        captioner=CaptionerSpec(),
        num_augmentations=2,
        num_synthetic_captions=2,
        samples_per_shard=8,
        num_shards=6,
        output_dir=output_dir,
        parallelism=parallelism,
    )
    kwargs.update(overrides)
    return GenerationJob(**kwargs)


@pytest.fixture(scope="module")
def prepared_models():
    return prepare(make_job("."))


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


def test_plan_creates_manifest(tmp_path):
    job = make_job(str(tmp_path))
    manifest = plan(job)
    assert os.path.exists(job.manifest_path())
    assert len(manifest.entries) == 6
    assert all(e.status == "pending" for e in manifest.entries)
    assert [e.path for e in manifest.entries] == [shard_filename(i) for i in range(6)]
    assert manifest.config == job.config_snapshot()


def test_plan_idempotent(tmp_path):
    job = make_job(str(tmp_path))
    first = plan(job)
    again = plan(job)
    assert again.to_dict() == first.to_dict()


def test_plan_conflict_lists_fields(tmp_path):
    plan(make_job(str(tmp_path)))
    other = make_job(str(tmp_path), num_synthetic_captions=3, samples_per_shard=4)
    with pytest.raises(ValueError, match="manifest conflict on fields") as excinfo:
        plan(other)
    msg = str(excinfo.value)
    assert "N (2 != 3)" in msg
    assert "samples_per_shard (8 != 4)" in msg


def test_snapshot_excludes_runtime_fields(tmp_path):
    a = make_job(str(tmp_path / "x"), parallelism=1)
    b = make_job(str(tmp_path / "y"), parallelism=7)
    assert a.config_snapshot() == b.config_snapshot()
    plan(make_job(str(tmp_path), parallelism=1))
    plan(make_job(str(tmp_path), parallelism=8))  # not a conflict


def test_job_round_trip(tmp_path):
    job = make_job("out", parallelism=3)
    assert GenerationJob.from_dict(job.to_dict()) == job
    path = str(tmp_path / "job.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(job.to_dict(), fh)
    assert GenerationJob.from_json_file(path) == job


@pytest.mark.parametrize(
    "overrides,msg",
    [
        (dict(teachers=()), "at least one teacher"),
        (dict(num_augmentations=0), "A must be >= 1"),
        (dict(num_synthetic_captions=-1), "N must be >= 0"),
        (dict(samples_per_shard=0), "samples_per_shard must be >= 1"),
        (dict(num_shards=-1), "num_shards must be >= 0"),
        (dict(parallelism=0), "parallelism must be >= 1"),
        (
            dict(teachers=(TeacherSpec("twin"), TeacherSpec("twin"))),
            "duplicate teacher ids",
        ),
    ],
)
def test_job_validation(overrides, msg):
    with pytest.raises(ValueError, match=msg):
        make_job(".", **overrides)


# ---------------------------------------------------------------------------
# generation content
# ---------------------------------------------------------------------------


def test_generate_shard_contents(prepared_models):
    world, teachers, captioner = prepared_models
    job = make_job(".")
    header, records = generate_shard(world, teachers, captioner, job, 1)
    assert header.shard_id == 1
    assert header.record_count == 8
    assert [t.teacher_id for t in header.teachers] == ["gen_a", "gen_b"]
    assert header.world_fingerprint == world.fingerprint

    start = 1 * job.samples_per_shard
    images, captions, _ = sample_arrays(world, "train", start, 8)
    assert [r.sample_id for r in records] == [
        sample_id_for("train", start + i) for i in range(8)
    ]
    assert np.array_equal(records[0].image, images[0])
    assert np.array_equal(records[0].gt_caption, captions[0])

    # stored image embeddings must match encoding the replayed view directly
    rec = records[3]
    view = replay(images[3], rec.aug_params[1]).pixels
    fresh = teachers[0].encode_image(view)
    assert np.allclose(rec.teacher_image_embs[0][1], fresh, atol=2.0**-6)
    # text row 0 is the ground-truth caption embedding
    fresh_txt = teachers[1].encode_text(captions[3])
    assert np.allclose(rec.teacher_text_embs[1][0], fresh_txt, atol=2.0**-6)


def test_refit_reproduces_identical_shards(tmp_path, prepared_models):
    job = make_job(str(tmp_path))
    fresh = prepare(job)
    h1, r1 = generate_shard(*prepared_models, job, 2)
    h2, r2 = generate_shard(*fresh, job, 2)
    p1 = str(tmp_path / "a.drsh")
    p2 = str(tmp_path / "b.drsh")
    write_shard(p1, h1, r1)
    write_shard(p2, h2, r2)
    assert read_bytes(p1) == read_bytes(p2)


# ---------------------------------------------------------------------------
# run: parallelism, resume, recovery
# ---------------------------------------------------------------------------


def test_parallelism_independent_output(tmp_path, prepared_models):
    d1 = str(tmp_path / "p1")
    d8 = str(tmp_path / "p8")
    r1 = run(make_job(d1, parallelism=1), prepared=prepared_models)
    r8 = run(make_job(d8, parallelism=8), prepared=prepared_models)
    assert sorted(r1.generated) == list(range(6))
    assert sorted(r8.generated) == list(range(6))
    assert r1.hashes == r8.hashes
    for i in range(6):
        assert read_bytes(os.path.join(d1, shard_filename(i))) == read_bytes(
            os.path.join(d8, shard_filename(i))
        )


def test_crash_and_resume_matches_uninterrupted(tmp_path, prepared_models):
    clean = make_job(str(tmp_path / "clean"))
    baseline = run(clean, prepared=prepared_models)

    crash = make_job(str(tmp_path / "crash"))
    seen = []

    def boom(index, total, content_hash):
        seen.append(index)
        if len(seen) == 3:
            raise RuntimeError("injected crash")

    with pytest.raises(RuntimeError, match="injected crash"):
        run(crash, progress=boom, prepared=prepared_models)

    partial = Manifest.load(crash.manifest_path())
    done_before = {i for i, e in enumerate(partial.entries) if e.status == "done"}
    assert len(done_before) == 3
    assert not partial.all_done()

    resumed = run(crash, prepared=prepared_models)
    assert set(resumed.skipped) == done_before
    assert set(resumed.generated) == set(range(6)) - done_before
    final = Manifest.load(crash.manifest_path())
    assert final.all_done()
    assert final.hashes() == Manifest.load(clean.manifest_path()).hashes()
    assert resumed.hashes == baseline.hashes
    for i in range(6):
        assert read_bytes(crash.shard_path(i)) == read_bytes(clean.shard_path(i))


def test_second_run_skips_everything(tmp_path, prepared_models):
    job = make_job(str(tmp_path))
    first = run(job, prepared=prepared_models)
    second = run(job, prepared=prepared_models)
    assert second.generated == []
    assert sorted(second.skipped) == list(range(6))
    assert second.hashes == first.hashes


def test_verify_downgrades_and_regenerates(tmp_path, prepared_models):
    job = make_job(str(tmp_path))
    first = run(job, prepared=prepared_models)

    blob = read_bytes(job.shard_path(1))
    with open(job.shard_path(1), "wb") as fh:
        fh.write(blob[:-7])
    os.unlink(job.shard_path(4))

    report = verify(job)
    assert report.checked == 6
    assert report.mismatched == [1]
    assert report.missing == [4]
    assert not report.clean

    manifest = Manifest.load(job.manifest_path())
    assert manifest.entries[1].status == "pending"
    assert "hash mismatch" in manifest.entries[1].note
    assert manifest.entries[4].status == "pending"
    assert manifest.entries[4].note == "missing file"

    second = run(job, prepared=prepared_models)
    assert sorted(second.generated) == [1, 4]
    assert second.hashes == first.hashes
    assert verify(job).clean


def test_zero_shards(tmp_path):
    job = make_job(str(tmp_path), num_shards=0)
    report = run(job)  # returns before model prep
    assert report.generated == []
    assert report.skipped == []
    assert report.hashes == {}
    assert Manifest.load(job.manifest_path()).all_done()


def test_fingerprint_guard(tmp_path, prepared_models):
    _world, teachers, captioner = prepared_models
    other = build_world(WorldConfig(num_classes=4, image_side=16, caption_dim=8, seed=9))
    job = make_job(str(tmp_path))
    with pytest.raises(ValueError, match="was fitted on world"):
        run(job, prepared=(other, teachers, captioner))


def test_captioner_backbone_must_be_in_roster():
    job = make_job(".", captioner=CaptionerSpec(backbone_teacher_id="ghost"))
    with pytest.raises(ValueError, match="not in the teacher roster"):
        prepare(job)


# ---------------------------------------------------------------------------
# leases
# ---------------------------------------------------------------------------


def test_lease_lifecycle(tmp_path):
    box = _LeaseBox(str(tmp_path), ttl=10.0)
    assert box.acquire(0, "w1", now=100.0)
    assert not box.acquire(0, "w2", now=105.0)  # foreign, unexpired
    assert box.acquire(0, "w1", now=106.0)  # holder refreshes its own lease
    assert not box.acquire(0, "w2", now=115.0)  # refreshed expiry is 116
    assert box.acquire(0, "w2", now=117.0)  # expired lease is stolen
    assert not box.acquire(0, "w1", now=118.0)
    box.release(0)
    box.release(0)  # releasing twice is fine
    assert box.acquire(0, "w1", now=200.0)


def test_lease_unreadable_file_is_reclaimed(tmp_path):
    box = _LeaseBox(str(tmp_path), ttl=10.0)
    assert box.acquire(3, "w1", now=0.0)
    with open(os.path.join(str(tmp_path), "leases", "shard-00003.lease"), "w") as fh:
        fh.write("not json")
    assert box.acquire(3, "w2", now=1.0)


def test_leases_are_per_shard(tmp_path):
    box = _LeaseBox(str(tmp_path), ttl=10.0)
    assert box.acquire(0, "w1", now=0.0)
    assert box.acquire(1, "w2", now=0.0)


# ---------------------------------------------------------------------------
# manifest state machine
# ---------------------------------------------------------------------------


def make_manifest(n=2):
    return Manifest(
        dataset_id="d",
        config={},
        entries=[ShardEntry(path=f"s{i}", record_count=1) for i in range(n)],
    )


def test_manifest_done_is_at_most_once():
    m = make_manifest()
    m.claim(0, "w")
    m.complete(0, "abc", "t0")
    m.complete(0, "abc", "t1")  # same hash: no-op, keeps original stamp
    assert m.entries[0].completed_at == "t0"
    with pytest.raises(ValueError, match="refusing different hash"):
        m.complete(0, "def", "t2")


def test_manifest_transition_guards():
    m = make_manifest()
    with pytest.raises(ValueError, match="cannot release"):
        m.release(0)
    with pytest.raises(ValueError, match="cannot downgrade"):
        m.downgrade(0, "why")
    m.claim(0, "w")
    with pytest.raises(ValueError, match="cannot claim"):
        m.claim(0, "w2")
    m.release(0, "gave up")
    assert m.entries[0].status == "pending"
    assert m.entries[0].note == "gave up"
    m.claim(0, "w")
    m.complete(0, "h", "t")
    m.downgrade(0, "corrupt")
    assert m.entries[0].status == "pending"
    assert m.entries[0].content_hash is None


def test_manifest_save_load_round_trip(tmp_path):
    m = make_manifest(3)
    m.claim(1, "w")
    m.claim(2, "w")
    m.complete(2, "deadbeef", "t")
    path = str(tmp_path / "manifest.json")
    m.save(path)
    back = Manifest.load(path)
    assert back.to_dict() == m.to_dict()
    assert back.pending_indices() == [0]
    assert back.hashes() == {2: "deadbeef"}


def test_manifest_rejects_unknown_status():
    with pytest.raises(ValueError, match="unknown shard status"):
        ShardEntry.from_dict({"path": "s", "record_count": 1, "status": "???"})


def test_config_conflicts_paths():
    a = {"x": 1, "nested": {"p": 1, "q": 2}, "only_a": True}
    b = {"x": 2, "nested": {"p": 1, "q": 3}}
    diffs = config_conflicts(a, b)
    assert "x (1 != 2)" in diffs
    assert "nested.q (2 != 3)" in diffs
    assert "only_a (missing in proposed)" in diffs
    assert config_conflicts(a, a) == []
