TITLES = {
    1: "PQ correctness",
    2: "PQ recall@10",
    3: "attention/fusion fidelity",
    4: "DCL loss fidelity",
    5: "VQ-VAE loss fidelity",
    6: "stage-1 desk-scale training",
    7: "stage-2 desk-scale training",
    8: "network equivalence",
    9: "determinism",
    10: "transfer demo",
}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}")
