"""
Unit tests for the write-verify tuning controller.

Noiseless runs check convergence and pulse discipline deterministically;
noisy runs use fixed seeds.
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from fg_array_sim.array import (
    ArrayState,
    ArrayTopology,
    BiasProtocol,
    CellClass,
    OpKind,
    RoutingVariant,
    bias_map,
)
from fg_array_sim.device import (
    READ_BIASES,
    CellState,
    DeviceParams,
    Pulse,
    pulse_update,
    read_current,
    state_for_current,
)
from fg_array_sim.errors import RangeError
from fg_array_sim.tuning import (
    DEFAULT_ERASE_RAMP,
    DEFAULT_PROGRAM_RAMP,
    DisturbReport,
    EventKind,
    RampSchedule,
    TuningPolicy,
    initial_erase,
    initial_program,
    tune_cell,
    tune_sequence,
)

TARGETS = [1e-6, 1e-7, 1e-8, 1e-9]


def uniform(routing, params, q=None) -> ArrayState:
    return ArrayState.uniform(ArrayTopology(4, 2, routing), params, q)


def true_current(array: ArrayState, cell) -> float:
    return read_current(array.cell(cell), READ_BIASES)


@pytest.mark.unit
class TestRampSchedule:
    """Integer-indexed amplitude ramps."""

    def test_default_program_ramp(self):
        ramp = DEFAULT_PROGRAM_RAMP
        assert ramp.amplitude(0) == 4.5
        assert ramp.amplitude(1) == 4.55
        assert ramp.max_index == 70
        assert ramp.amplitude(ramp.max_index) == 8.0
        assert ramp.amplitude(500) == 8.0

    def test_default_erase_ramp(self):
        assert DEFAULT_ERASE_RAMP.amplitude(0) == 5.0
        assert DEFAULT_ERASE_RAMP.max_index == 70
        assert DEFAULT_ERASE_RAMP.amplitude(DEFAULT_ERASE_RAMP.max_index) == 8.5
        assert DEFAULT_ERASE_RAMP.pulse_duration == 0.6e-3

    def test_negative_index(self):
        with pytest.raises(RangeError):
            DEFAULT_PROGRAM_RAMP.amplitude(-1)

    def test_start_above_max_rejected(self):
        with pytest.raises(ValidationError):
            RampSchedule(start_amplitude=8.0, step=0.05, max_amplitude=7.0, pulse_duration=5e-6)

    @pytest.mark.parametrize("target", [0.1e-9, 3e-6])
    def test_target_outside_tunable_range(self, target):
        with pytest.raises(ValidationError):
            TuningPolicy().for_target(target)

    def test_for_target_keeps_policy(self):
        config = TuningPolicy(rel_tolerance=0.02, backoff_steps=2).for_target(1e-8)
        assert config.target == 1e-8
        assert config.rel_tolerance == 0.02
        assert config.backoff_steps == 2


@pytest.mark.unit
class TestTuneCell:
    """Single-cell closed-loop tuning."""

    def test_immediate_convergence(self, array_at, noiseless, rng):
        array = array_at(RoutingVariant.MODIFIED, noiseless, 1e-7)
        trace = tune_cell(array, (1, 0), TuningPolicy().for_target(1e-7), rng)
        assert trace.converged
        assert trace.pulses_used == 0
        assert [e.kind for e in trace.events] == [EventKind.READ]

    @pytest.mark.parametrize("start", ["erased", "programmed"])
    @pytest.mark.parametrize("target", TARGETS)
    def test_noiseless_convergence_from_both_ends(self, noiseless, rng, start, target):
        q = noiseless.q_max if start == "erased" else noiseless.q_min
        array = uniform(RoutingVariant.MODIFIED, noiseless, q)
        trace = tune_cell(array, (0, 0), TuningPolicy().for_target(target), rng)
        assert trace.converged
        assert trace.pulses_used <= 1000
        assert trace.rel_error <= 0.01
        assert true_current(array, (0, 0)) == pytest.approx(target, rel=0.01)

    def test_erased_to_1ua_with_noise(self, params, rng):
        array = uniform(RoutingVariant.MODIFIED, params)
        trace = tune_cell(array, (2, 1), TuningPolicy().for_target(1e-6), rng)
        assert trace.converged
        assert true_current(array, (2, 1)) == pytest.approx(1e-6, rel=0.02)

    def test_trace_alternates_and_ends_with_read(self, params, rng):
        array = uniform(RoutingVariant.MODIFIED, params)
        trace = tune_cell(array, (0, 1), TuningPolicy().for_target(1e-8), rng)
        kinds = [e.kind for e in trace.events]
        assert kinds[0] is EventKind.READ and kinds[-1] is EventKind.READ
        for previous, current in zip(kinds, kinds[1:]):
            assert (previous is EventKind.READ) != (current is EventKind.READ)
        assert len(trace.tune_events()) == trace.pulses_used
        assert trace.final_current == trace.reads[-1].measured
        assert [e.index for e in trace.events] == list(range(len(trace.events)))

    def test_amplitude_discipline(self, params, rng):
        policy = TuningPolicy()
        ramps = {EventKind.PROGRAM: policy.program_ramp, EventKind.ERASE: policy.erase_ramp}
        array = uniform(RoutingVariant.MODIFIED, params, params.q_min)
        trace = tune_cell(array, (3, 0), policy.for_target(1e-7), rng)
        pulses = trace.tune_events()
        assert pulses

        last = {}
        previous = None
        for event in pulses:
            ramp = ramps[event.kind]
            assert ramp.start_amplitude <= event.amplitude <= ramp.max_amplitude
            if event.kind not in last:
                expected = ramp.start_amplitude
            elif event.kind is previous.kind:
                expected = min(previous.amplitude + ramp.step, ramp.max_amplitude)
            else:
                expected = max(
                    ramp.start_amplitude, last[event.kind] - policy.backoff_steps * ramp.step
                )
            assert event.amplitude == pytest.approx(expected, abs=1e-9)
            last[event.kind] = event.amplitude
            previous = event

    def test_direction_follows_measurement(self, params, rng):
        array = uniform(RoutingVariant.MODIFIED, params, params.q_min)
        trace = tune_cell(array, (0, 0), TuningPolicy().for_target(1e-8), rng)
        for read, pulse in zip(trace.events[0::2], trace.events[1::2]):
            expected = EventKind.PROGRAM if read.measured > 1e-8 else EventKind.ERASE
            assert pulse.kind is expected

    def test_max_pulses_exhausted(self, noiseless, rng):
        array = uniform(RoutingVariant.MODIFIED, noiseless)
        trace = tune_cell(array, (0, 0), TuningPolicy(max_pulses=5).for_target(1e-6), rng)
        assert not trace.converged
        assert trace.pulses_used == 5
        assert trace.events[-1].kind is EventKind.READ

    def test_both_ramps_capped(self, noiseless, rng):
        policy = TuningPolicy(
            program_ramp=RampSchedule(
                start_amplitude=8.0, step=0.05, max_amplitude=8.0, pulse_duration=1.0
            ),
            erase_ramp=RampSchedule(
                start_amplitude=5.0, step=0.05, max_amplitude=5.0, pulse_duration=1e-6
            ),
            backoff_steps=0,
        )
        array = uniform(RoutingVariant.MODIFIED, noiseless)
        trace = tune_cell(array, (0, 0), policy.for_target(1e-6), rng)
        assert not trace.converged
        assert [e.kind for e in trace.events] == [
            EventKind.READ, EventKind.PROGRAM, EventKind.READ
        ]

    def test_unreachable_target(self, rng):
        shallow = DeviceParams(q_min=-0.3, noise_a=0.0, noise_b=0.0)
        array = uniform(RoutingVariant.MODIFIED, shallow)
        with pytest.raises(RangeError):
            tune_cell(array, (0, 0), TuningPolicy().for_target(1e-9), rng)
        assert array.cell((0, 0)).q == shallow.q_max

    def test_cell_outside_array(self, modified_array, rng):
        with pytest.raises(RangeError):
            tune_cell(modified_array, (0, 2), TuningPolicy().for_target(1e-7), rng)

    def test_same_seed_same_trace(self, params):
        traces = []
        for _ in range(2):
            array = uniform(RoutingVariant.MODIFIED, params)
            traces.append(
                tune_cell(array, (1, 1), TuningPolicy().for_target(1e-8), np.random.default_rng(5))
            )
        assert traces[0].events == traces[1].events
        assert traces[0].final_current == traces[1].final_current

    def test_trace_jsonl(self, params, rng, tmp_path):
        array = uniform(RoutingVariant.MODIFIED, params)
        trace = tune_cell(array, (0, 0), TuningPolicy().for_target(1e-6), rng)
        path = trace.write_jsonl(tmp_path / "traces" / "cell.jsonl")
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == len(trace.events)
        assert set(records[0]) == {"index", "kind", "amplitude", "measured", "q_after"}
        assert records[0]["kind"] == "read" and records[0]["amplitude"] is None
        assert records[1]["kind"] == "program" and records[1]["measured"] is None


def lookahead_pulse_count(state: CellState, candidates, target: float, tol: float) -> int:
    """
    Greedy brute-force controller: at each step try every admissible pulse and
    keep the one landing closest to the target.

    Distance is measured in charge, which orders candidates like |I - target|
    but does not tie them while the readout sits at its clamp.
    """
    goal = state_for_current(target, READ_BIASES, state.params).q
    count = 0
    while abs(read_current(state, READ_BIASES) - target) / target > tol:
        options = [pulse_update(state, pulse)[0] for pulse in candidates]
        state = min(options, key=lambda s: abs(s.q - goal))
        count += 1
        assert count < 2000, "lookahead controller did not converge"
    return count


@pytest.mark.unit
class TestLookaheadOracle:
    """tune_cell pulse count against a brute-force lookahead controller."""

    @pytest.mark.parametrize("target", [1e-6, 1e-9])
    def test_within_three_times_oracle(self, noiseless, rng, target):
        topology = ArrayTopology(4, 2, RoutingVariant.MODIFIED)
        protocol = BiasProtocol.for_routing(topology.routing)
        policy = TuningPolicy()
        candidates = []
        ramps = ((OpKind.PROGRAM, policy.program_ramp), (OpKind.ERASE, policy.erase_ramp))
        for op_kind, ramp in ramps:
            for index in range(ramp.max_index + 1):
                grid = bias_map(topology, op_kind, (0, 0), protocol, ramp.amplitude(index))
                candidates.append(Pulse(grid[0][0], ramp.pulse_duration))

        oracle = lookahead_pulse_count(
            CellState.erased(noiseless), candidates, target, policy.rel_tolerance
        )
        array = ArrayState.uniform(topology, noiseless)
        trace = tune_cell(array, (0, 0), policy.for_target(target), rng, protocol)
        assert trace.converged
        assert oracle > 0
        assert trace.pulses_used <= 3 * oracle


@pytest.mark.unit
class TestInitialPulses:
    """Full-range erase and program pulses."""

    def test_initial_erase_of_programmed_cell(self, noiseless):
        array = uniform(RoutingVariant.MODIFIED, noiseless, noiseless.q_min)
        initial_erase(array, (1, 1))
        assert array.cell((1, 1)).q >= 0.99 * noiseless.q_max

    def test_initial_erase_of_erased_cell(self, modified_array):
        reports = initial_erase(modified_array, (0, 0))
        assert modified_array.cell((0, 0)).q == modified_array.cell((0, 0)).params.q_max
        assert reports[0][0].delta_q == 0.0

    def test_initial_erase_off_gate_line_cells_untouched(self, array_at, noiseless):
        array = array_at(RoutingVariant.MODIFIED, noiseless, 1e-6)
        array.set_cell((0, 0), CellState.programmed(noiseless))
        before = array.read_currents()
        initial_erase(array, (0, 0))
        after = array.read_currents()
        gate_line = array.topology.gate_line_members(array.topology.lines((0, 0)).gate)
        for cell in array.topology.cells():
            if cell not in gate_line:
                assert after[cell] == pytest.approx(before[cell], rel=1e-3)

    def test_initial_erase_recharges_gate_line_neighbours(self, array_at, noiseless):
        # Zero selected drain/source leave only the source rail on the shared gate line
        modified = array_at(RoutingVariant.MODIFIED, noiseless, 1e-7)
        modified.set_cell((0, 0), CellState.programmed(noiseless))
        initial_erase(modified, (0, 0))
        rel = true_current(modified, (2, 0)) / 1e-7 - 1.0
        assert 0.05 < rel < 0.25

        original = array_at(RoutingVariant.ORIGINAL, noiseless, 1e-7)
        original.set_cell((0, 0), CellState.programmed(noiseless))
        initial_erase(original, (0, 0))
        assert true_current(original, (0, 1)) == noiseless.i_max

    def test_initial_program_of_erased_cell(self, modified_array):
        initial_program(modified_array, (2, 0))
        assert true_current(modified_array, (2, 0)) <= 1e-9

    def test_initial_program_of_programmed_cell(self, noiseless):
        array = uniform(RoutingVariant.ORIGINAL, noiseless, noiseless.q_min)
        reports = initial_program(array, (0, 0))
        assert array.cell((0, 0)).q == noiseless.q_min
        assert reports[0][0].clamped

    @pytest.mark.parametrize("routing", list(RoutingVariant))
    def test_initial_program_spares_other_cells(self, array_at, noiseless, routing):
        array = array_at(routing, noiseless, 1e-6)
        before = array.read_currents()
        initial_program(array, (0, 0))
        rel = np.abs(array.read_currents() - before) / before
        rel[0, 0] = 0.0
        assert rel.max() < 1e-3


@pytest.mark.unit
class TestTuneSequence:
    """Sequential tuning with disturb tracking."""

    def test_single_cell_matches_tune_cell(self, params):
        policy = TuningPolicy()
        seq_array = uniform(RoutingVariant.MODIFIED, params)
        cell_array = uniform(RoutingVariant.MODIFIED, params)
        traces, report = tune_sequence(
            seq_array, [((1, 0), 1e-7)], policy, np.random.default_rng(3)
        )
        single = tune_cell(cell_array, (1, 0), policy.for_target(1e-7), np.random.default_rng(3))
        assert traces[0].events == single.events
        assert np.array_equal(seq_array.charges(), cell_array.charges())
        assert report.max_drift == 0.0
        assert len(report.records) == 1

    def test_modified_eight_cells_at_1ua(self, params, rng):
        array = uniform(RoutingVariant.MODIFIED, params)
        cells = list(array.topology.cells())
        traces, report = tune_sequence(array, [(c, 1e-6) for c in cells], TuningPolicy(), rng)
        assert all(t.converged for t in traces)
        assert report.max_drift < 0.01
        assert [r.cell for r in report.records] == cells

    @pytest.mark.parametrize("start", ["programmed", "erased"])
    @pytest.mark.parametrize("target", [1e-6, 1e-8])
    def test_modified_leaves_untouched_cells_alone(
        self, array_at, noiseless, rng, start, target
    ):
        # Untouched cells sit off the i_max clamp so any recharge shows in the readout
        array = array_at(RoutingVariant.MODIFIED, noiseless, 1e-8)
        tuned = [(0, 0), (1, 0), (2, 0), (3, 1)]
        untouched = [(0, 1), (1, 1), (2, 1), (3, 0)]
        begin = getattr(CellState, start)(noiseless)
        for cell in tuned:
            array.set_cell(cell, begin)
        before = {cell: true_current(array, cell) for cell in untouched}
        traces, _ = tune_sequence(array, [(c, target) for c in tuned], TuningPolicy(), rng)
        assert all(t.converged for t in traces)
        for cell in untouched:
            assert abs(true_current(array, cell) - before[cell]) / before[cell] < 5e-3

    def test_original_initial_erase_disturbs_half_c(self, original_array, rng):
        cells = list(original_array.topology.cells())
        _, report = tune_sequence(
            original_array, [(c, 1e-6) for c in cells], TuningPolicy(), rng, initial="erase"
        )
        by_class = report.drift_by_class()
        assert by_class[CellClass.HALF_C] >= 0.10
        assert report.worst.cell_class is CellClass.HALF_C

    def test_duplicate_cells_rejected(self, modified_array, rng):
        with pytest.raises(RangeError):
            tune_sequence(modified_array, [((0, 0), 1e-7), ((0, 0), 1e-8)], TuningPolicy(), rng)

    def test_unknown_initial_rejected(self, modified_array, rng):
        with pytest.raises(RangeError):
            tune_sequence(modified_array, [((0, 0), 1e-7)], TuningPolicy(), rng, initial="reset")

    def test_empty_report(self):
        report = DisturbReport()
        assert report.worst is None
        assert report.max_drift == 0.0
        assert report.drift_by_class() == {}
