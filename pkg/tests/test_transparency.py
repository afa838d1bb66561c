"""The instrumented run must be indistinguishable from native execution."""
from __future__ import annotations

import pytest

from bopunpack.dbi import EngineConfig, SelfModMethod, run_unpack
from bopunpack.image import load
from bopunpack.machine import CACHE_BASE, CACHE_END, run_reference
from bopunpack.packers import PACKER_IDS

FUEL = 10_000_000
CACHE = (CACHE_BASE, CACHE_END)
CASES = [(pid, m) for pid in PACKER_IDS for m in SelfModMethod]


def _config(sample, method, **kw):
    return EngineConfig(selfmod_method=method, oep_range=sample.oep_range, **kw)


def _snapshot(state):
    return state.arch_view(), state.pc, state.mem.digest(exclude=CACHE)


@pytest.fixture(scope="module")
def reference(samples):
    """Per sample: full reference trace and a snapshot after every instruction."""
    out = {}
    for pid, sample in samples.items():
        snaps = {}
        report = run_reference(load(sample.image), FUEL,
                               on_step=lambda s, n, _o: snaps.__setitem__(n, _snapshot(s)))
        out[pid] = (report, snaps)
    return out


@pytest.mark.parametrize("pid,method", CASES)
def test_trace_is_prefix(samples, reference, pid, method):
    sample = samples[pid]
    report = run_unpack(sample.image, _config(sample, method))
    ref_trace = reference[pid][0].trace
    assert report.success
    assert report.trace == ref_trace[:len(report.trace)]
    # the stop is right at the OEP: the next native instruction is the OEP
    assert ref_trace[len(report.trace)][0] == report.oep


@pytest.mark.parametrize("pid,method", CASES)
def test_state_matches_at_every_exit(samples, reference, pid, method):
    sample = samples[pid]
    snaps = reference[pid][1]
    checked = []

    def compare(state, n, result):
        if n == 0:
            return
        assert _snapshot(state) == snaps[n], (n, result)
        checked.append(n)

    run_unpack(sample.image, _config(sample, method), on_exit=compare)
    assert len(checked) >= 5


@pytest.mark.parametrize("pid,method", CASES)
def test_resumed_trace_equals_reference(samples, reference, pid, method):
    from bopunpack.dbi import resume_native
    sample = samples[pid]
    report = run_unpack(sample.image, _config(sample, method))
    final = resume_native(report, FUEL)
    assert final.r0 == 55
    assert report.trace == reference[pid][0].trace


@pytest.mark.parametrize("pid", PACKER_IDS)
def test_stack_holds_only_original_addresses(samples, pid):
    """No cache address ever becomes visible on the guest stack."""
    sample = samples[pid]

    def scan(state, n, result):
        sp, top = state.sp, load(sample.image).regs[7]
        for addr in range(sp, top, 4):
            assert not CACHE_BASE <= state.mem.read_u32(addr) < CACHE_END

    run_unpack(sample.image, _config(sample, SelfModMethod.ADLER32), on_exit=scan)


def test_naive_returns_leak_cache_addresses(samples):
    leaked = []
    top = load(samples["P2"].image).regs[7]

    def scan(state, n, result):
        words = (state.mem.read_u32(a) for a in range(state.sp, top, 4))
        leaked.append(any(CACHE_BASE <= w < CACHE_END for w in words))

    run_unpack(samples["P2"].image, EngineConfig(original_returns=False), on_exit=scan)
    assert any(leaked)


@pytest.mark.parametrize("pid", PACKER_IDS)
def test_delivered_records_use_original_addresses(samples, reference, pid):
    sample = samples[pid]
    report = run_unpack(sample.image, _config(sample, SelfModMethod.ADLER32))
    for rec in report.delivered:
        assert not CACHE_BASE <= rec.address < CACHE_END
    ref_delivered = reference[pid][0].delivered
    assert report.delivered == ref_delivered[:len(report.delivered)]


@pytest.mark.parametrize("pid", PACKER_IDS)
def test_singlestep_parity(samples, reference, pid):
    sample = samples[pid]
    for method in SelfModMethod:
        report = run_unpack(sample.image, _config(sample, method))
        assert report.stats.singlesteps_delivered == reference[pid][0].singlesteps
