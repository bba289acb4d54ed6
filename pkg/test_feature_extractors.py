import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.alignment import LinearMap
from src.embeddings_io import EmbeddingTable
from src.errors import ArgumentError, DimensionError, ParseError
from src.feature_extractors import (
    FeatureConfig, FrameSequence, ParalinguisticCNN, WaveformSegment, WordEvent, extract_paralinguistic,
    extract_semantic, label_mask, load_waveform, load_word_events, paralinguistic_frames, pool_frames,
    resample_matrix, resample_to_label_rate, save_waveform, save_word_events, segment_waveform,
    segment_word_events, semantic_vectors,
)
from src.tensor_core import counter_rng, gradient_check


@pytest.fixture
def small_config():
    # 2500 samples, 250x downsampling, 10 CNN frames at 4 Hz
    return FeatureConfig(sample_rate=1000, segment_seconds=2.5, label_rate=4, conv_channels=[3, 4, 2])


@pytest.fixture
def speech_table():
    return EmbeddingTable(("hello", "world"), np.array([2.0, 1.0]),
                          np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))


def test_default_layout_frame_arithmetic():
    config = FeatureConfig()
    assert config.samples_per_segment == 220500
    assert config.downsample == 250
    assert config.cnn_frames == 882
    assert config.cnn_frame_rate == pytest.approx(88.2)
    assert config.label_frames == 100


def test_full_size_zero_waveform_gives_zero_frames():
    config = FeatureConfig()
    cnn = ParalinguisticCNN(config, counter_rng(0))
    seq = extract_paralinguistic(WaveformSegment(np.zeros(220500)), cnn)
    assert seq.frames.shape == (882, 125)
    assert not np.any(seq.frames)


def test_wrong_sample_count_raises(small_config):
    cnn = ParalinguisticCNN(small_config, counter_rng(0))
    with pytest.raises(ArgumentError):
        extract_paralinguistic(WaveformSegment(np.zeros(2499), sample_rate=1000), cnn)


def test_paralinguistic_output_is_finite_and_nonnegative(small_config):
    rng = counter_rng(1)
    cnn = ParalinguisticCNN(small_config, rng)
    seq = extract_paralinguistic(WaveformSegment(rng.uniform(-1, 1, 2500), sample_rate=1000), cnn)
    assert seq.frames.shape == (10, 2)
    assert np.all(np.isfinite(seq.frames))
    assert np.all(seq.frames >= 0)


def test_shifting_input_by_one_hop_shifts_interior_frames(small_config):
    rng = counter_rng(2)
    cnn = ParalinguisticCNN(small_config, rng)
    x = rng.uniform(-1, 1, 2500)
    shifted = np.concatenate([rng.uniform(-1, 1, 250), x[:2250]])
    a = cnn.forward(x).data
    b = cnn.forward(shifted).data
    for j in range(1, 8):
        assert_allclose(b[j + 1], a[j], atol=1e-9)


def test_conv_kernel_gradient_matches_finite_differences(small_config):
    rng = counter_rng(3)
    cnn = ParalinguisticCNN(small_config, rng)
    x = rng.uniform(-1, 1, 2500)
    weights = rng.standard_normal((10, 2))
    kernel = cnn.params["conv0.W"]

    def fn(k):
        cnn.params["conv0.W"] = k
        return (cnn.forward(x) * weights).sum()

    assert gradient_check(fn, [kernel], h=1e-6) < 1e-4


def test_padded_segment_masks_trailing_frames(small_config):
    cnn = ParalinguisticCNN(small_config, counter_rng(4))
    segment = WaveformSegment(np.ones(2500), sample_rate=1000, valid_length=1000)
    seq = extract_paralinguistic(segment, cnn)
    assert_array_equal(seq.mask, [True] * 4 + [False] * 6)
    assert not np.any(seq.frames[4:])


def test_segment_waveform_pads_final_segment(small_config):
    segments = segment_waveform(np.ones(6000), small_config, prefix="call")
    assert [s.segment_id for s in segments] == ["call0000", "call0001", "call0002"]
    assert all(len(s.samples) == 2500 for s in segments)
    assert segments[-1].valid_length == 1000
    assert not np.any(segments[-1].samples[1000:])
    assert label_mask(segments[-1], small_config).sum() == 4


def test_feature_config_rejects_layouts_without_whole_frames():
    with pytest.raises(ValidationError):
        FeatureConfig(sample_rate=1000, segment_seconds=2.6)
    with pytest.raises(ValidationError):
        FeatureConfig(conv_kernels=[8, 6])
    with pytest.raises(ValidationError):
        FeatureConfig(sample_rate=1000, segment_seconds=2.5, label_rate=5)


def test_segment_word_events_uses_local_time_and_clips_at_boundary(small_config):
    events = [WordEvent("a", 0.5, 1.0), WordEvent("b", 2.0, 3.0), WordEvent("c", 5.5, 6.0)]
    pieces = segment_word_events(events, small_config, 3)
    assert pieces[0] == [WordEvent("a", 0.5, 1.0), WordEvent("b", 2.0, 2.5)]
    assert pieces[1] == []
    assert pieces[2] == [WordEvent("c", 0.5, 1.0)]


def test_word_event_rejects_bad_span():
    with pytest.raises(ArgumentError):
        WordEvent("x", 2.0, 2.0)
    with pytest.raises(ArgumentError):
        WordEvent("x", -0.1, 1.0)


def test_frame_sequence_zeroes_masked_frames():
    seq = FrameSequence(np.ones((3, 2)), 10.0, mask=[True, False, True])
    assert_array_equal(seq.frames[1], [0.0, 0.0])
    assert seq.duration == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# Semantic stream
# ---------------------------------------------------------------------------

FRAME_TIMES = np.arange(100) / 10.0


def test_no_events_give_zero_frames(speech_table):
    seq = extract_semantic([], speech_table, np.eye(3), FRAME_TIMES, frame_rate=10.0)
    assert seq.frames.shape == (100, 3)
    assert not np.any(seq.frames)


def test_single_word_at_start_fills_every_frame(speech_table):
    W = counter_rng(5).standard_normal((4, 3))
    seq = extract_semantic([WordEvent("world", 0.0, 0.5)], speech_table, LinearMap(W), FRAME_TIMES)
    expected = W @ speech_table.vector("world")
    assert seq.frames.shape == (100, 4)
    assert_allclose(seq.frames, np.tile(expected, (100, 1)))
    assert seq.frame_rate == pytest.approx(10.0)


def test_hold_last_word_switches_at_start_time(speech_table):
    events = [WordEvent("world", 5.0, 6.0), WordEvent("hello", 0.0, 1.0)]
    seq = extract_semantic(events, speech_table, np.eye(3), FRAME_TIMES, frame_rate=10.0)
    assert_array_equal(seq.frames[:50], np.tile([1.0, 0.0, 0.0], (50, 1)))
    assert_array_equal(seq.frames[50:], np.tile([0.0, 2.0, 0.0], (50, 1)))


def test_frames_before_first_word_are_zero(speech_table):
    seq = extract_semantic([WordEvent("hello", 1.0, 2.0)], speech_table, None, FRAME_TIMES, 10.0)
    assert not np.any(seq.frames[:10])
    assert_array_equal(seq.frames[10], [1.0, 0.0, 0.0])


def test_unknown_tokens_are_skipped_with_warning(speech_table, caplog):
    events = [WordEvent("hello", 0.0, 1.0), WordEvent("mystery", 2.0, 3.0)]
    with caplog.at_level(logging.WARNING):
        seq = extract_semantic(events, speech_table, np.eye(3), FRAME_TIMES, 10.0)
    assert "Skipped 1 word events" in caplog.text
    assert_array_equal(seq.frames[-1], [1.0, 0.0, 0.0])


def test_map_with_wrong_input_width_raises_dimension_error(speech_table):
    with pytest.raises(DimensionError):
        semantic_vectors([WordEvent("hello", 0.0, 1.0)], speech_table, np.eye(4))
    with pytest.raises(DimensionError):
        extract_semantic([], speech_table, LinearMap(np.ones((3, 5))), FRAME_TIMES, 10.0)


# ---------------------------------------------------------------------------
# Rate conversion
# ---------------------------------------------------------------------------

def test_882_frames_pool_to_100_bins_of_eight_or_nine():
    pooling = resample_matrix(882, 100)
    sizes = np.count_nonzero(pooling, axis=1)
    assert set(sizes) == {8, 9}
    assert sizes.sum() == 882
    assert_allclose(pooling.sum(axis=1), 1.0)
    assert pooling[-1, -1] > 0


def test_resample_to_label_rate_shapes_and_constants():
    seq = FrameSequence(np.full((882, 3), 2.5), 88.2)
    out = resample_to_label_rate(seq, 10.0)
    assert out.frames.shape == (100, 3)
    assert out.frame_rate == 10.0
    assert_allclose(out.frames, 2.5)


def test_equal_bins_preserve_channel_mean():
    frames = counter_rng(6).standard_normal((800, 4))
    out = resample_to_label_rate(FrameSequence(frames, 80.0), 10.0)
    assert_allclose(out.frames.mean(axis=0), frames.mean(axis=0), atol=1e-9)


def test_label_rate_above_frame_rate_raises():
    with pytest.raises(ArgumentError):
        resample_to_label_rate(FrameSequence(np.ones((10, 1)), 5.0), 10.0)


def test_resample_matrix_rejects_upsampling():
    with pytest.raises(ArgumentError):
        resample_matrix(5, 6)


def test_pooled_cnn_frames_match_extract_then_resample():
    config = FeatureConfig(sample_rate=1000, segment_seconds=2.5, label_rate=2, conv_channels=[3, 4, 2])
    rng = counter_rng(8)
    cnn = ParalinguisticCNN(config, rng)
    segment = WaveformSegment(rng.uniform(-1, 1, 2500), sample_rate=1000)
    pooled = pool_frames(paralinguistic_frames(segment, cnn), config.cnn_frame_rate, config.label_rate)
    expected = resample_to_label_rate(extract_paralinguistic(segment, cnn), config.label_rate)
    assert pooled.shape == (config.label_frames, 2)
    assert_allclose(pooled.data, expected.frames)


def test_pooled_frames_carry_gradient_to_conv_kernel():
    config = FeatureConfig(sample_rate=1000, segment_seconds=2.5, label_rate=2, conv_channels=[3, 4, 2])
    rng = counter_rng(9)
    cnn = ParalinguisticCNN(config, rng)
    x = rng.uniform(-1, 1, 2500)
    weights = rng.standard_normal((5, 2))

    def fn(k):
        cnn.params["conv0.W"] = k
        return (pool_frames(cnn.forward(x), config.cnn_frame_rate, config.label_rate) * weights).sum()

    assert gradient_check(fn, [cnn.params["conv0.W"]], h=1e-6) < 1e-4


def test_pool_frames_rejects_upsampling():
    with pytest.raises(ArgumentError):
        pool_frames(np.ones((10, 1)), 5.0, 10.0)


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def test_wav_round_trip_within_pcm_resolution(tmp_path):
    samples = counter_rng(7).uniform(-0.9, 0.9, 500)
    save_waveform(tmp_path / "a.wav", samples, sample_rate=1000)
    loaded = load_waveform(tmp_path / "a.wav", sample_rate=1000)
    assert loaded.shape == (500,)
    assert np.max(np.abs(loaded - samples)) < 1e-4


def test_wav_with_other_sample_rate_is_rejected(tmp_path):
    save_waveform(tmp_path / "a.wav", np.zeros(10), sample_rate=8000)
    with pytest.raises(ArgumentError):
        load_waveform(tmp_path / "a.wav", sample_rate=1000)


def test_raw_float_round_trip(tmp_path):
    samples = np.array([0.5, -0.25, 0.125])
    save_waveform(tmp_path / "a.raw", samples)
    assert_array_equal(load_waveform(tmp_path / "a.raw"), samples)


def test_word_events_round_trip(tmp_path):
    events = {"s0": [WordEvent("hi", 0.0, 0.4), WordEvent("there", 0.5, 1.25)], "s1": [WordEvent("ok", 1.0, 2.0)]}
    save_word_events(tmp_path / "words.csv", events)
    assert load_word_events(tmp_path / "words.csv") == events


def test_word_events_bad_header_and_span_report_lines(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("token,start,end\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_word_events(path)
    assert info.value.line == 1

    path.write_text("segment_id,token,start,end\ns0,a,0,1\ns0,b,3,2\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_word_events(path)
    assert info.value.line == 3


def test_overlapping_words_report_line(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("segment_id,token,start,end\ns0,a,0,1\ns1,c,0,4\ns0,b,0.5,2\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_word_events(path)
    assert info.value.line == 4


def test_touching_words_are_accepted(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("segment_id,token,start,end\ns0,a,0,1\ns0,b,1,2\n", encoding="utf-8")
    assert load_word_events(path)["s0"] == [WordEvent("a", 0.0, 1.0), WordEvent("b", 1.0, 2.0)]


def test_word_past_recording_end_reports_line(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("segment_id,token,start,end\ns0,a,0,1\ns0,b,1.5,3\ns1,c,0,9\n", encoding="utf-8")
    assert len(load_word_events(path, {"s0": 3.0})["s1"]) == 1
    with pytest.raises(ParseError) as info:
        load_word_events(path, {"s0": 2.5})
    assert info.value.line == 3
