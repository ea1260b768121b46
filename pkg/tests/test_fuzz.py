from unittest import TestCase

from richwasm.core.ir import Const, UnitV
from richwasm.core.syntax import print_module
from richwasm.core.typecheck import check_module
from richwasm.fuzz import REPORT_COLUMNS, GenConfig, check_safety, fuzz_safety, generate_program

FUZZ_PROGRAMS = 1000


class TestGenerator(TestCase):
    def setUp(self) -> None:
        self.cfg = GenConfig(seed=1)

    def test_deterministic(self) -> None:
        for index in range(20):
            a, instrs_a, allocations_a = generate_program(self.cfg, index)
            b, instrs_b, allocations_b = generate_program(self.cfg, index)
            self.assertEqual(print_module(a), print_module(b))
            self.assertEqual((instrs_a, allocations_a), (instrs_b, allocations_b))

    def test_well_typed(self) -> None:
        for index in range(100):
            module, _, _ = generate_program(self.cfg, index)
            check_module(module)

    def test_allocation_budget(self) -> None:
        cfg = GenConfig(seed=2, max_locations=2)
        for index in range(100):
            _, _, allocations = generate_program(cfg, index)
            # reference-typed results are allocated on top of the budget
            self.assertLessEqual(allocations, cfg.max_locations + 2)

    def test_depth_zero_is_values_only(self) -> None:
        cfg = GenConfig(seed=4, max_depth=0)
        for index in range(20):
            _, instrs, allocations = generate_program(cfg, index)
            self.assertEqual(allocations, 0)
            self.assertTrue(all(isinstance(e, (Const, UnitV)) for e in instrs))


class TestSafety(TestCase):
    def test_single_program(self) -> None:
        module, instrs, _ = generate_program(GenConfig(seed=9), 0)
        verdict = check_safety(module, instrs)
        self.assertIn(verdict['status'], ('done', 'trap'))
        self.assertFalse(verdict['progress_violation'])
        self.assertFalse(verdict['preservation_violation'])

    def test_no_violations(self) -> None:
        report = fuzz_safety(GenConfig(seed=0), FUZZ_PROGRAMS)
        self.assertEqual(list(report.columns), REPORT_COLUMNS)
        self.assertEqual(len(report), FUZZ_PROGRAMS)
        failed = report[report['progress_violation'] | report['preservation_violation']]
        self.assertEqual(len(failed), 0, msg=failed['detail'].tolist()[:5])
        self.assertTrue(set(report['status']) <= {'done', 'trap'})
        self.assertGreater(int(report['allocations'].sum()), 0)
        self.assertGreater(int((report['status'] == 'trap').sum()), 0)

    def test_collection_every_step(self) -> None:
        report = fuzz_safety(GenConfig(seed=6, collect_interval=1), 50)
        self.assertEqual(int((report['progress_violation'] | report['preservation_violation']).sum()), 0)
