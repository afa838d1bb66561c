from __future__ import annotations

from bopunpack.dbi import EngineConfig, SelfModMethod, run_unpack
from bopunpack.image import library_range
from bopunpack.machine import SP
from bopunpack.oep import DetectorState, OepHit, Strategy

from conftest import bare_machine

LIB = library_range()


def test_on_write_records_bytes():
    det = DetectorState(Strategy.WRITTEN_THEN_EXECUTED)
    det.on_write(0x1000, 4)
    assert det.dirty_set >= {0x1000, 0x1001, 0x1002, 0x1003}


def test_on_write_ignored_for_range():
    det = DetectorState(Strategy.SECTION_RANGE, (0x1000, 0x1800))
    det.on_write(0x1000, 4)
    assert det.dirty_set == set()


def test_overlapping_writes_union():
    det = DetectorState(Strategy.WRITTEN_THEN_EXECUTED)
    det.on_write(0x1000, 4)
    det.on_write(0x1002, 4)
    assert det.dirty_set == set(range(0x1000, 0x1006))


def test_range_fires_inside():
    det = DetectorState(Strategy.SECTION_RANGE, (0x1000, 0x1800))
    state = bare_machine()
    assert det.on_transfer(0x0FFF, 0x4000, state) is None
    assert det.on_transfer(0x1800, 0x4000, state) is None
    assert det.on_transfer(0x1040, 0x4000, state) == OepHit(0x1040)


def test_fires_once():
    det = DetectorState(Strategy.SECTION_RANGE, (0x1000, 0x1800))
    state = bare_machine()
    assert det.on_transfer(0x1040, None, state) is not None
    assert det.on_transfer(0x1044, None, state) is None
    assert det.fired == OepHit(0x1040)


def test_wx_fires_on_written_target():
    det = DetectorState(Strategy.WRITTEN_THEN_EXECUTED)
    state = bare_machine()
    assert det.on_transfer(0x1000, 0x4000, state) is None
    det.on_write(0x1000, 4)
    assert det.on_transfer(0x1000, 0x4000, state) == OepHit(0x1000)


def test_wx_on_p1(samples):
    sample = samples["P1"]
    report = run_unpack(sample.image, EngineConfig(oep_strategy=Strategy.WRITTEN_THEN_EXECUTED))
    assert report.oep == sample.true_oep


def _api_state(ret):
    state = bare_machine()
    state.regs[SP] -= 4
    state.mem.write_u32(state.sp, ret)
    return state


def test_api_call_from_stub_ignored():
    det = DetectorState(Strategy.FIRST_LIBRARY_CALL, lib_range=LIB,
                        stub_ignore_range=(0x4000, 0x5000))
    assert det.on_transfer(LIB[0] + 0x20, 0x4010, _api_state(0x4015), 0x4015) is None
    assert det.fired is None


def test_api_reports_candidate():
    det = DetectorState(Strategy.FIRST_LIBRARY_CALL, lib_range=LIB,
                        stub_ignore_range=(0x4000, 0x5000))
    # a computed jump into the library: the return address on the stack is the hint
    assert det.on_transfer(LIB[0], 0x1010, _api_state(0x1234)) == OepHit(0x1234, True)


def test_api_direct_call_reports_call_site():
    det = DetectorState(Strategy.FIRST_LIBRARY_CALL, lib_range=LIB)
    hit = det.on_transfer(LIB[0] + 0x20, 0x1000, _api_state(0x1005), 0x1005)
    assert hit == OepHit(0x1000, candidate=True)


def test_api_ignores_non_library_targets():
    det = DetectorState(Strategy.FIRST_LIBRARY_CALL, lib_range=LIB)
    assert det.on_transfer(0x1000, 0x4000, _api_state(0)) is None


def test_range_and_wx_agree(samples):
    for pid in ("P1", "P2", "P3", "P4"):
        image = samples[pid].image
        hits = {run_unpack(image, EngineConfig(oep_strategy=s)).oep
                for s in (Strategy.SECTION_RANGE, Strategy.WRITTEN_THEN_EXECUTED)}
        assert hits == {samples[pid].true_oep}


def test_detector_independent_of_method(samples):
    for strategy in Strategy:
        image = samples["P2"].image
        hits = {run_unpack(image, EngineConfig(selfmod_method=m, oep_strategy=strategy)).oep
                for m in SelfModMethod}
        assert len(hits) == 1
