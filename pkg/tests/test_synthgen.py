"""Synthetic scene generator: the test oracle for the rest of the pipeline."""

import json

import numpy as np
import pytest

from dashkin import cansig, datastore, synthgen
from dashkin.cansig import decode_signal, parse_can_csv
from dashkin.datastore import LEAD_DISTANCE_ABSENT, LEAD_REL_SPEED_ABSENT
from dashkin.synthgen import (
    GenerationError,
    SceneParams,
    ScriptedPhase,
    default_signal_specs,
    encode_signal_frame,
    generate_drive_files,
    make_corpus,
    render,
    sample_scene,
    scripted_scene,
    write_can_csv,
)


def constant_scene(chunk_id="c", n=12, speed=40.0, yaw=0.0, lead_distance=None,
                   noise=0.0, seed=7, frame_size=32, fps=5.0):
    lp = np.zeros(n) if lead_distance is None else np.ones(n)
    ld = np.full(n, LEAD_DISTANCE_ABSENT if lead_distance is None else lead_distance)
    ls = np.full(n, 0.0 if lead_distance is None else -3.0)
    return SceneParams(chunk_id=chunk_id, fps=fps, frame_size=frame_size,
                       speed=np.full(n, float(speed)), yaw=np.full(n, float(yaw)),
                       lead_present=lp, lead_distance=ld, lead_rel_speed=ls,
                       noise=noise, seed=seed)


class TestSceneParamsValidation:
    def test_profile_lengths_must_agree(self):
        params = constant_scene()
        params.yaw = params.yaw[:-1]
        with pytest.raises(GenerationError, match="lengths"):
            params.validate()

    def test_minimum_two_frames(self):
        with pytest.raises(GenerationError, match="2 frames"):
            constant_scene(n=1).validate()

    def test_bad_fps_and_frame_size(self):
        with pytest.raises(GenerationError):
            constant_scene(fps=0.0).validate()
        with pytest.raises(GenerationError):
            constant_scene(frame_size=4).validate()

    def test_negative_noise(self):
        with pytest.raises(GenerationError, match="noise"):
            constant_scene(noise=-0.1).validate()

    def test_non_finite_profiles(self):
        params = constant_scene()
        params.speed[3] = np.nan
        with pytest.raises(GenerationError, match="speed"):
            params.validate()

    def test_lead_present_range(self):
        params = constant_scene()
        params.lead_present[0] = 1.5
        with pytest.raises(GenerationError, match="lead_present"):
            params.validate()

    def test_lead_schedule_must_cover_present_frames(self):
        params = constant_scene(lead_distance=50.0)
        params.lead_distance[4] = np.nan
        with pytest.raises(GenerationError, match="undefined"):
            params.validate()
        params = constant_scene(lead_distance=50.0)
        params.lead_distance[4] = 0.0
        with pytest.raises(GenerationError, match="non-positive"):
            params.validate()

    def test_absent_frames_may_hold_junk(self):
        params = constant_scene()
        params.lead_distance[:] = np.nan  # lead never present, so ignored
        params.validate()


class TestRenderDeterminism:
    def test_identical_params_render_identical_bytes(self):
        a, _ = render(constant_scene(noise=0.05))
        b, _ = render(constant_scene(noise=0.05))
        assert a.frames.dtype == np.uint8
        assert np.array_equal(a.frames, b.frames)

    def test_seed_changes_the_scene(self):
        a, _ = render(constant_scene(seed=1))
        b, _ = render(constant_scene(seed=2))
        assert not np.array_equal(a.frames, b.frames)

    def test_frame_layout(self):
        chunk, track = render(constant_scene(n=9, frame_size=16))
        assert chunk.frames.shape == (9, 3, 16, 16)
        # grayscale replicated across channels
        assert np.array_equal(chunk.frames[:, 0], chunk.frames[:, 1])
        assert np.array_equal(chunk.frames[:, 0], chunk.frames[:, 2])


class TestRenderLabels:
    def test_labels_are_the_profiles_with_sentinels(self):
        n = 14
        params = constant_scene(n=n, speed=33.0, yaw=-2.0)
        params.lead_present[5:10] = 1.0
        params.lead_distance[5:10] = 60.0
        params.lead_rel_speed[5:10] = -4.0
        _, track = render(params)
        assert np.allclose(track.speed, 33.0)
        assert np.allclose(track.yaw, -2.0)
        assert np.array_equal(track.lead_present, params.lead_present)
        assert np.all(track.lead_distance[5:10] == 60.0)
        assert np.all(track.lead_rel_speed[5:10] == -4.0)
        absent = track.lead_present < 0.5
        assert np.all(track.lead_distance[absent] == LEAD_DISTANCE_ABSENT)
        assert np.all(track.lead_rel_speed[absent] == LEAD_REL_SPEED_ABSENT)


class TestSpeedIsTemporalOnly:
    """A single frame must not reveal speed: two scenes differing only in
    speed share frame 0 bitwise and diverge from frame 1 on."""

    def test_first_frame_independent_of_speed(self):
        slow, _ = render(constant_scene(speed=15.0))
        fast, _ = render(constant_scene(speed=65.0))
        assert np.array_equal(slow.frames[0], fast.frames[0])
        assert not np.array_equal(slow.frames[1], fast.frames[1])

    def test_holds_with_noise(self):
        slow, _ = render(constant_scene(speed=15.0, noise=0.05))
        fast, _ = render(constant_scene(speed=65.0, noise=0.05))
        assert np.array_equal(slow.frames[0], fast.frames[0])

    def test_faster_scenes_move_more(self):
        def mean_frame_delta(speed):
            chunk, _ = render(constant_scene(n=20, speed=speed, frame_size=64))
            gray = chunk.frames[:, 0].astype(np.float64)
            return float(np.abs(np.diff(gray, axis=0)).mean())

        assert mean_frame_delta(60.0) > 2.0 * mean_frame_delta(10.0)

    def test_yaw_changes_motion_too(self):
        straight, _ = render(constant_scene(yaw=0.0))
        turning, _ = render(constant_scene(yaw=8.0))
        assert np.array_equal(straight.frames[0], turning.frames[0])
        assert not np.array_equal(straight.frames[1], turning.frames[1])


class TestLeadRendering:
    def test_lead_darkens_center(self):
        with_lead, _ = render(constant_scene(lead_distance=30.0, frame_size=64))
        without, _ = render(constant_scene(frame_size=64))
        size = 64
        yc, xc = int(0.42 * size), size // 2
        patch_lead = with_lead.frames[0, 0, yc - 2:yc + 2, xc - 2:xc + 2]
        patch_bare = without.frames[0, 0, yc - 2:yc + 2, xc - 2:xc + 2]
        assert patch_lead.mean() < patch_bare.mean()

    def test_closer_lead_is_larger(self):
        bare, _ = render(constant_scene(frame_size=64))

        def changed_pixels(distance):
            chunk, _ = render(constant_scene(lead_distance=distance, frame_size=64))
            return int((chunk.frames[0, 0] != bare.frames[0, 0]).sum())

        assert changed_pixels(10.0) > changed_pixels(100.0) > 0


class TestSampleScene:
    def test_plain_encodes_only_speed(self, rng):
        for _ in range(20):
            params = sample_scene("p", 20, 5.0, 32, rng, difficulty="plain")
            params.validate()
            assert np.all(params.yaw == 0.0)
            assert np.all(params.lead_present == 0.0)
            lo, hi = synthgen.SPEED_RANGE
            assert lo <= params.speed[0] <= hi
            assert np.all(params.speed == params.speed[0])

    def test_standard_scene_properties(self, rng):
        saw_lead = False
        for _ in range(30):
            params = sample_scene("s", 24, 5.0, 32, rng)
            params.validate()
            assert np.all(params.yaw == params.yaw[0])
            assert -3.0 <= params.yaw[0] <= 3.0
            present = params.lead_present >= 0.5
            if present.any():
                saw_lead = True
                idx = np.flatnonzero(present)
                assert np.array_equal(idx, np.arange(idx[0], idx[-1] + 1))
                assert idx.size >= 24 // 4
                assert np.all(params.lead_distance[present] >= 5.0)
                assert np.all(params.lead_distance[present] <= 250.0)
                rels = params.lead_rel_speed[present]
                assert np.all(rels == rels[0])
        assert saw_lead

    def test_unknown_difficulty(self, rng):
        with pytest.raises(GenerationError, match="difficulty"):
            sample_scene("x", 10, 5.0, 32, rng, difficulty="extreme")

    def test_seeds_vary_between_draws(self, rng):
        a = sample_scene("a", 10, 5.0, 32, rng)
        b = sample_scene("b", 10, 5.0, 32, rng)
        assert a.seed != b.seed or a.speed[0] != b.speed[0]


class TestScriptedScene:
    def test_phase_layout(self):
        phases = [ScriptedPhase(2.0, speed=30.0),
                  ScriptedPhase(1.0, speed=30.0, yaw=6.0),
                  ScriptedPhase(2.0, speed=30.0, lead=(50.0, -10.0))]
        params = scripted_scene("s", phases, fps=5.0)
        assert params.n == 25
        assert np.all(params.speed == 30.0)
        assert np.all(params.yaw[10:15] == 6.0)
        assert np.all(params.yaw[:10] == 0.0)
        assert np.all(params.lead_present[15:] == 1.0)
        assert np.all(params.lead_present[:15] == 0.0)

    def test_lead_distance_evolves_with_rel_speed(self):
        params = scripted_scene("s", [ScriptedPhase(2.0, lead=(50.0, -36.0))], fps=5.0)
        # -36 km/h is -10 m/s: one frame at 5 fps closes 2 m
        assert params.lead_distance[0] == pytest.approx(50.0)
        assert params.lead_distance[1] == pytest.approx(48.0)
        assert np.all(params.lead_rel_speed == -36.0)

    def test_distance_clipped_at_minimum(self):
        params = scripted_scene("s", [ScriptedPhase(20.0, lead=(6.0, -36.0))], fps=5.0)
        assert params.lead_distance.min() == pytest.approx(5.0)
        params.validate()


class TestMakeCorpus:
    def test_small_corpus(self, tmp_path):
        store = make_corpus(tmp_path, n_chunks=3, seed=9, frame_size=16,
                            chunk_seconds=2.0)
        metas = store.metas()
        assert [m.chunk_id for m in metas] == ["synth-0000", "synth-0001", "synth-0002"]
        assert len({m.drive_id for m in metas}) == 3
        chunk, track = store.load_chunk("synth-0001")
        assert chunk.frames.shape == (10, 3, 16, 16)
        track.validate(n=10)

    def test_corpus_is_seed_deterministic(self, tmp_path):
        a = make_corpus(tmp_path / "a", n_chunks=2, seed=5, frame_size=16)
        b = make_corpus(tmp_path / "b", n_chunks=2, seed=5, frame_size=16)
        fa, _ = a.load_chunk("synth-0000")
        fb, _ = b.load_chunk("synth-0000")
        assert np.array_equal(fa.frames, fb.frames)

    def test_too_small_corpus_rejected(self, tmp_path):
        with pytest.raises(GenerationError):
            make_corpus(tmp_path, n_chunks=1)


class TestSignalEncoding:
    def test_round_trip_all_default_specs(self, rng):
        ranges = {"speed": (0.0, 200.0), "yaw": (-90.0, 90.0),
                  "lead_present": (0.0, 1.0), "lead_distance": (0.0, 250.0),
                  "lead_rel_speed": (-80.0, 80.0)}
        for spec in default_signal_specs():
            lo, hi = ranges[spec.name]
            for _ in range(50):
                value = float(rng.uniform(lo, hi))
                if spec.name == "lead_present":
                    value = float(rng.integers(0, 2))
                frame = encode_signal_frame(spec, value, time=1.0)
                assert len(frame.payload) == 8
                decoded = decode_signal(frame, spec)
                assert decoded is not None
                assert abs(decoded.value - value) <= abs(spec.scale) / 2

    def test_out_of_range_value_rejected(self):
        speed = default_signal_specs()[0]
        with pytest.raises(ValueError, match="range"):
            encode_signal_frame(speed, -1.0, time=0.0)
        with pytest.raises(ValueError, match="range"):
            encode_signal_frame(speed, 700.0, time=0.0)  # raw 70000 > u16 max

    def test_csv_round_trip_uppercase_hex(self, tmp_path):
        spec = default_signal_specs()[0]
        frames = [encode_signal_frame(spec, 52.5, time=float(t)) for t in range(3)]
        path = tmp_path / "bus.csv"
        write_can_csv(path, frames)
        text = path.read_text()
        assert text.splitlines()[0] == ",".join(cansig.CSV_COLUMNS)
        body = "".join(text.splitlines()[1:])
        assert body == body.upper()
        parsed = parse_can_csv(path)
        assert len(parsed) == 3
        assert [f.time for f in parsed] == [0.0, 1.0, 2.0]
        assert all(decode_signal(f, spec).value == pytest.approx(52.5, abs=0.005)
                   for f in parsed)


class TestGenerateDriveFiles:
    def test_layout_and_fidelity(self, tmp_path):
        from dashkin import cli

        manifest_path = generate_drive_files(tmp_path, n_drives=2,
                                             chunks_per_drive=2, seed=4,
                                             frame_size=16, chunk_seconds=2.0)
        entries = cli.load_manifest(manifest_path)
        assert len(entries) == 2
        for entry in entries:
            video = np.load(entry.video_path)
            assert video.shape == (20, 16, 16, 3)
            assert video.dtype == np.uint8
            frames = parse_can_csv(entry.can_csv_path)
            # five signals per label timestamp
            assert len(frames) == 20 * 5
            times = sorted({f.time for f in frames})
            assert len(times) == 20
            assert times[0] == pytest.approx(100.0)
            assert entry.video_start_time_s == pytest.approx(100.0)

        specs = cansig.load_signal_specs(tmp_path / "specs.json")
        assert [s.name for s in specs] == list(datastore.ATTRIBUTES)

    def test_decoded_series_match_rendered_labels(self, tmp_path):
        manifest_path = generate_drive_files(tmp_path, n_drives=1,
                                             chunks_per_drive=1, seed=11,
                                             frame_size=16, chunk_seconds=2.0,
                                             difficulty="standard")
        from dashkin import cli

        (entry,) = cli.load_manifest(manifest_path)
        frames = parse_can_csv(entry.can_csv_path)
        specs = cansig.specs_by_name(cansig.load_signal_specs(tmp_path / "specs.json"))
        speed = [decode_signal(f, specs["speed"]).value for f in frames
                 if f.message_id == specs["speed"].message_id]
        assert len(speed) == 10
        # constant-speed scene: every sample decodes to the same quantized value
        assert len(set(speed)) == 1
