import json
import shutil

import numpy as np
import pytest

from lvvolume.data_model import FALLBACK_NOTE, Series, SeriesKind, Study, Truth, list_studies, load_study, validate_study, write_study
from lvvolume.errors import FrameCountMismatch, StudyFormatError


@pytest.fixture(scope="module")
def written(default_study, tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    return write_study(default_study.study, root / default_study.study.id)


def test_round_trip(default_study, written):
    s = default_study.study
    back = load_study(written)
    assert back.id == s.id and back.truth == s.truth and back.age == s.age
    for kind in SeriesKind:
        a, b = s.series(kind), back.series(kind)
        assert a.n_positions == b.n_positions and a.n_frames == b.n_frames
        assert a.planes == b.planes
        for fa, fb in zip(a.frames, b.frames):
            # uint16 on disk: at most half a grey level of round-off
            assert np.max(np.abs(np.rint(fa) - fb)) == 0
    assert back.sax.n_positions == 10 and back.sax.n_frames == 20


def test_missing_2ch(written, tmp_path):
    d = tmp_path / "s"
    shutil.copytree(written, d)
    shutil.rmtree(d / "2ch")
    meta = json.loads((d / "meta.json").read_text())
    del meta["series"]["2ch"]
    (d / "meta.json").write_text(json.dumps(meta))
    s = load_study(d)
    assert s.ch2 is None and s.ch4 is not None
    assert any("2ch" in n for n in s.notes)
    report = validate_study(s)
    assert not report.fatal and report.warnings == [FALLBACK_NOTE]


def test_frame_count_mismatch(written, tmp_path):
    d = tmp_path / "s"
    shutil.copytree(written, d)
    (d / "sax" / "pos3" / "frame19.png").unlink()
    with pytest.raises(FrameCountMismatch):
        load_study(d)


def test_bad_meta(tmp_path):
    (tmp_path / "meta.json").write_text("{not json")
    with pytest.raises(StudyFormatError):
        load_study(tmp_path)
    with pytest.raises(StudyFormatError):
        load_study(tmp_path / "absent")


def test_validate_complete(default_study):
    report = validate_study(default_study.study)
    assert len(report) == 0 and not report.fatal
    # pure: same answer twice
    assert validate_study(default_study.study) == report


def test_validate_three_positions(default_study):
    sax = default_study.study.sax
    short = Series(SeriesKind.SAX, sax.frames[:3], sax.planes[:3])
    report = validate_study(Study("s", short))
    assert report.fatal


def test_validate_no_sax():
    assert validate_study(Study("s", None)).fatal


def test_series_frame_counts(default_study):
    sax = default_study.study.sax
    with pytest.raises(FrameCountMismatch):
        Series(SeriesKind.SAX, (sax.frames[0], sax.frames[1][:5]), sax.planes[:2])


def test_truth_order():
    with pytest.raises(StudyFormatError):
        Truth(50.0, 60.0)


def test_list_studies(written):
    assert list_studies(written.parent) == [written]
