# test_fl_sim.py
import numpy as np
import pytest

from conftest import make_client
from herl.client_profile import Population, estimate_round_latency
from herl.errors import InputError, PlanError
from herl.fl_sim import (
    ExperimentSettings,
    GlobalModel,
    SimulationEngine,
    TrainerModel,
    accuracy_at,
    fedavg,
    run_experiment,
    sample_participants,
    simulate_local_training,
    tier_round_time,
    time_to_accuracy,
)
from herl.he_plan import CostModel, ParameterPlan, precision_penalty, security_bits, validate_plan


@pytest.fixture
def make_settings(small_population, table, cost, grid, quiet_trainer):
    def build(**overrides):
        values = dict(
            population=small_population,
            table=table,
            cost=cost,
            actions=grid,
            trainer=quiet_trainer,
            seed=0,
            rounds=20,
            participation_rate=1.0,
            n_params=100_000,
            criteria=("security", "latency"),
            k=9,
        )
        values.update(overrides)
        return ExperimentSettings(**values)

    return build


def population_of(n):
    return Population(clients=[make_client(i, speed=0.1 + (i % 10) * 0.2) for i in range(n)])


class TestSampleParticipants:
    def test_ten_percent_of_thousand(self):
        assert len(sample_participants(population_of(1000), 0.1, 0, seed=1)) == 100

    def test_full_participation(self, small_population):
        assert sample_participants(small_population, 1.0, 3, seed=1) == small_population.ids

    def test_deterministic_per_seed_and_round(self):
        pop = population_of(200)
        assert sample_participants(pop, 0.2, 5, seed=9) == sample_participants(pop, 0.2, 5, seed=9)
        assert sample_participants(pop, 0.2, 5, seed=9) != sample_participants(pop, 0.2, 6, seed=9)

    def test_at_least_one(self, small_population):
        assert len(sample_participants(small_population, 0.01, 0, seed=0)) == 1

    def test_rate_bounds(self, small_population):
        with pytest.raises(InputError):
            sample_participants(small_population, 0.0, 0, seed=0)
        with pytest.raises(InputError):
            sample_participants(small_population, 1.5, 0, seed=0)


class TestLocalTraining:
    rng = np.random.default_rng(0)

    def test_formula(self):
        tm = TrainerModel(a_max=0.8, rate=0.05)
        gain = simulate_local_training(make_client(0), GlobalModel(), tm, ParameterPlan(log_n=14, q_bits=200), CostModel(), self.rng)
        assert gain == pytest.approx(0.04)

    def test_saturation(self, cost):
        tm = TrainerModel(a_max=0.8, rate=0.05)
        plan = ParameterPlan(log_n=14, q_bits=200)
        ceiling = 0.8 * (1 - precision_penalty(plan, cost))
        assert simulate_local_training(make_client(0), GlobalModel(accuracy=ceiling), tm, plan, cost, self.rng) == 0.0

    def test_higher_q_gains_more(self, cost, low_plan):
        tm = TrainerModel(a_max=0.8, rate=0.05)
        g = GlobalModel(accuracy=0.3)
        high = ParameterPlan(log_n=13, q_bits=200)
        low = simulate_local_training(make_client(0), g, tm, low_plan, cost, self.rng)
        assert simulate_local_training(make_client(0), g, tm, high, cost, self.rng) >= low

    def test_clamped_to_ceiling_from_above(self, cost):
        tm = TrainerModel(a_max=0.8, rate=0.05)
        plan = ParameterPlan(log_n=13, q_bits=60)
        ceiling = 0.8 * (1 - precision_penalty(plan, cost))
        gain = simulate_local_training(make_client(0), GlobalModel(accuracy=0.7), tm, plan, cost, self.rng)
        assert 0.7 + gain == pytest.approx(ceiling)

    def test_noise_stays_in_range(self, cost, high_plan):
        tm = TrainerModel(a_max=0.8, rate=0.05, noise_sd=0.5, heterogeneity_sd=0.5)
        rng = np.random.default_rng(4)
        ceiling = 0.8 * (1 - precision_penalty(high_plan, cost))
        for acc in (0.0, 0.4, ceiling):
            for _ in range(200):
                projected = acc + simulate_local_training(make_client(0), GlobalModel(accuracy=acc), tm, high_plan, cost, rng)
                assert -1e-12 <= projected <= ceiling + 1e-12


class TestTierRoundTime:
    def test_single_participant(self, cost, low_plan):
        c = make_client(0, speed=0.4)
        assert tier_round_time([c], low_plan, cost, 1000) == estimate_round_latency(c, low_plan, cost, 1000)

    def test_max_of_members(self, low_plan):
        free = CostModel(he_coeff=1e-30)
        fast, slow = make_client(0, train=3.0, bandwidth=1e15), make_client(1, train=7.0, bandwidth=1e15)
        assert tier_round_time([fast, slow], low_plan, free, 1) == pytest.approx(7.0)

    def test_slower_member_never_decreases(self, cost, low_plan):
        members = [make_client(0, speed=1.0)]
        before = tier_round_time(members, low_plan, cost, 10_000)
        after = tier_round_time(members + [make_client(1, speed=0.3)], low_plan, cost, 10_000)
        assert after >= before

    def test_empty(self, cost, low_plan):
        with pytest.raises(InputError):
            tier_round_time([], low_plan, cost, 10)


class TestFedAvg:
    def test_equal_sizes(self):
        assert fedavg([(0.2, 5), (0.4, 5)]) == pytest.approx(0.3)

    def test_weighted(self):
        assert fedavg([(0.0, 1), (4.0, 3)]) == pytest.approx(3.0)

    def test_single(self):
        assert fedavg([(0.42, 7)]) == pytest.approx(0.42)

    def test_empty(self):
        with pytest.raises(InputError):
            fedavg([])

    def test_vectors(self):
        out = fedavg([(np.array([1.0, 0.0]), 1), (np.array([0.0, 1.0]), 3)])
        np.testing.assert_allclose(out, [0.25, 0.75])

    def test_vector_length_mismatch(self):
        with pytest.raises(InputError):
            fedavg([(np.zeros(2), 1), (np.zeros(3), 1)])

    def test_matches_weighted_mean_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            values = rng.uniform(0, 1, size=n)
            sizes = rng.integers(1, 500, size=n)
            expected = sum(float(v) * int(s) for v, s in zip(values, sizes)) / int(sizes.sum())
            assert fedavg(list(zip(values, sizes))) == pytest.approx(expected, abs=1e-12)


class TestEngine:
    def test_baseline_has_no_security_loss(self, make_settings):
        result = run_experiment(make_settings(), "baseline")
        assert result.total_security_loss == 0

    def test_weak_uniform_plan_counts_losses(self, make_settings, small_population):
        weak = ParameterPlan(log_n=13, q_bits=200)
        result = run_experiment(make_settings(heuristic_plan=weak, rounds=3), "heuristic")
        demanding = sum(1 for c in small_population.clients if c.security_req > 128)
        assert [r.security_loss for r in result.rounds] == [demanding] * 3

    def test_clock_starts_at_slowest_tier(self, make_settings, small_population, cost, high_plan):
        engine = SimulationEngine(make_settings(), "baseline")
        report = engine.run_round()
        expected = tier_round_time(small_population.clients, high_plan, cost, 100_000)
        assert report.sim_time == pytest.approx(expected)
        assert report.sim_time == max(t.round_time for t in report.tiers)

    def test_clock_strictly_increases_and_accuracy_bounded(self, make_settings, cost):
        noisy = TrainerModel(a_max=0.8, rate=0.1, noise_sd=0.02, heterogeneity_sd=0.02)
        result = run_experiment(make_settings(trainer=noisy, rounds=40, participation_rate=0.5), "herl")
        times = [r.sim_time for r in result.rounds]
        assert all(a < b for a, b in zip(times, times[1:]))
        for r in result.rounds:
            ceiling = max(0.8 * (1 - precision_penalty(t.plan, cost)) for t in r.tiers if t.participants)
            assert 0.0 <= r.global_accuracy <= ceiling + 1e-12

    def test_security_loss_recount(self, make_settings, table, small_population):
        settings = make_settings(participation_rate=0.5, rounds=15)
        engine = SimulationEngine(settings, "herl")
        reqs = {c.id: c.security_req for c in small_population.clients}
        for _ in range(settings.rounds):
            report = engine.run_round()
            participants = sample_participants(small_population, 0.5, report.round, settings.seed)
            membership = engine.tiering.membership()
            for t in report.tiers:
                members = [cid for cid in participants if membership[cid] == t.tier]
                assert t.participants == len(members)
                assert t.security_loss == sum(1 for cid in members if security_bits(t.plan, table) < reqs[cid])

    def test_herl_plans_are_admissible(self, make_settings, table, grid):
        result = run_experiment(make_settings(rounds=30), "herl")
        for r in result.rounds:
            assert r.agent_seconds < 1.0
            for t in r.tiers:
                assert t.plan in grid
                assert validate_plan(t.plan, table)
        assert result.qtable is not None
        assert result.to_frame()["reward"].notna().all()

    def test_zero_rounds(self, make_settings):
        result = run_experiment(make_settings(rounds=0), "baseline")
        assert result.rounds == []
        assert result.convergence_time is None
        assert len(result.to_frame()) == 0

    def test_deterministic(self, make_settings):
        noisy = TrainerModel(a_max=0.8, rate=0.1, noise_sd=0.01, heterogeneity_sd=0.01)
        a = run_experiment(make_settings(trainer=noisy, participation_rate=0.5), "herl")
        b = run_experiment(make_settings(trainer=noisy, participation_rate=0.5), "herl")
        assert a.to_frame().to_csv(index=False) == b.to_frame().to_csv(index=False)
        assert a.summary() == b.summary()

    def test_higher_q_reaches_target_in_fewer_rounds(self, make_settings):
        high = run_experiment(make_settings(baseline_plan=ParameterPlan(log_n=14, q_bits=200), rounds=60), "baseline")
        low = run_experiment(make_settings(baseline_plan=ParameterPlan(log_n=14, q_bits=100), rounds=60), "baseline")

        def rounds_to(result, target):
            return next(r.round for r in result.rounds if r.global_accuracy >= target)

        for target in (0.4, 0.6, 0.75):
            assert rounds_to(high, target) <= rounds_to(low, target)
        for h, l in zip(high.rounds, low.rounds):
            assert h.tiers and max(t.round_time for t in h.tiers) >= max(t.round_time for t in l.tiers)

    def test_adaptive_gives_slow_tier_the_small_plan(self, make_settings, low_plan, high_plan):
        engine = SimulationEngine(make_settings(criteria=("latency",), k=2), "adaptive")
        report = engine.run_round()
        assert [t.plan for t in report.tiers] == [high_plan, low_plan]

    def test_unprofiled_clients_are_placed(self, make_settings, small_population):
        engine = SimulationEngine(make_settings(criteria=("latency",), k=2, profiled_fraction=0.5), "baseline")
        assert sum(engine.tiering.sizes) == 6
        engine.run_round()
        assert sorted(engine.tiering.membership()) == small_population.ids

    def test_tier_states_follow_reference_latency(self, make_settings, cost, high_plan):
        engine = SimulationEngine(make_settings(), "herl")
        agent = engine.strategy.agent
        before = [engine.tier_state(k) for k in range(engine.tiering.k)]
        for _ in range(20):
            engine.run_round()
        assert [engine.tier_state(k) for k in range(engine.tiering.k)] == before
        for k, tier in enumerate(engine.tiering.tiers):
            members = [engine.clients[cid] for cid in tier]
            expected = agent.state(members, lambda c: estimate_round_latency(c, high_plan, cost, 100_000))
            assert engine.tier_state(k) == expected

    def test_placement_builds_a_new_tiering(self, make_settings):
        engine = SimulationEngine(make_settings(criteria=("latency",), k=2, profiled_fraction=0.5), "baseline")
        first = engine.tiering
        snapshot = first.model_dump()
        engine.run_round()
        assert engine.tiering is not first
        assert first.model_dump() == snapshot
        assert sum(first.sizes) == 6

    def test_histories_stay_within_window(self, make_settings):
        engine = SimulationEngine(make_settings(), "baseline")
        for _ in range(engine.ctx.latency_window + 15):
            engine.run_round()
        assert {len(h) for h in engine.ctx.latency_history.values()} == {engine.ctx.latency_window}
        assert {len(h) for h in engine.ctx.utility_history.values()} == {engine.ctx.utility_window}

    def test_dynamic_retiering(self, make_settings):
        settings = make_settings(tiering_method="roundtime", k=3, dynamic=True, retier_every=2, rounds=6)
        engine = SimulationEngine(settings, "herl")
        first = engine.tiering
        for _ in range(6):
            engine.run_round()
        assert engine.tiering is not first
        assert engine.tiering.k == 3

    def test_async_clock_never_exceeds_sync(self, make_settings):
        sync = SimulationEngine(make_settings(), "adaptive").run_round()
        async_ = SimulationEngine(make_settings(aggregation="async"), "adaptive").run_round()
        assert async_.sim_time <= sync.sim_time

    def test_target_accuracy_stops_early(self, make_settings):
        result = run_experiment(make_settings(target_accuracy=0.5, rounds=200), "baseline")
        assert len(result.rounds) < 200
        assert result.final_accuracy >= 0.5
        assert result.convergence_time == result.total_time

    def test_convergence_is_fraction_of_final(self, make_settings):
        result = run_experiment(make_settings(rounds=50), "baseline")
        target = 0.95 * result.final_accuracy
        assert result.convergence_time == time_to_accuracy(result, target)
        assert accuracy_at(result, result.convergence_time) >= target
        assert accuracy_at(result, 0.0) == 0.0

    def test_summary_fields(self, make_settings):
        summary = run_experiment(make_settings(rounds=10), "adaptive").summary()
        assert summary["rounds"] == 10
        assert set(summary["straggler_breakdown_s"]) == {"train_s", "he_s", "comm_s"}
        # every tier has members and every client takes part each round
        assert sum(sum(h.values()) for h in summary["plan_histogram"].values()) == 10 * 9


class TestSettingsChecks:
    def test_empty_grid(self, make_settings):
        with pytest.raises(PlanError):
            SimulationEngine(make_settings(actions=[]), "baseline")

    def test_inadmissible_uniform_plan(self, make_settings):
        with pytest.raises(PlanError):
            SimulationEngine(make_settings(baseline_plan=ParameterPlan(log_n=13, q_bits=300)), "baseline")

    def test_unknown_strategy(self, make_settings):
        with pytest.raises(InputError):
            run_experiment(make_settings(), "greedy")
