"""Shared store for the one-line verdicts of the acceptance criteria."""

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "doubling transfer exactness",
    2: "variance series",
    3: "CLT / WIP",
    4: "bounded LIL",
    5: "GPM normalization direction",
    6: "tail-condition checker",
    7: "decomposition properties",
    8: "phi-coefficient oracle and covariance inequalities",
    9: "martingale decomposition",
    10: "exponential maximal bound",
    11: "diagonal coupling",
    12: "reproducibility",
}


def report(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), detail)
    assert ok, f"criterion {number} ({TITLES[number]}): {detail}"


def lines(outcomes: dict[int, str] | None = None) -> list[str]:
    outcomes = outcomes or {}
    out = []
    for k in sorted(TITLES):
        if k in RESULTS:
            ok, detail = RESULTS[k]
            out.append(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {TITLES[k]}: {detail}")
        else:
            if k in outcomes:
                out.append(f"criterion {k:2d} FAIL  {TITLES[k]}: raised before reaching its verdict")
            else:
                out.append(f"criterion {k:2d} ----  {TITLES[k]}: not run in this session")
    return out
