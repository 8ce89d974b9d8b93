"""Regenerate the small bundled fixtures (tiny dataset, synthetic loss curves)."""

import json
from pathlib import Path

from diffscale.curves import dump_runs
from diffscale.synthetic import ChinchillaSurface, chinchilla_runs, log_spaced_family

OUT = Path(__file__).resolve().parents[1] / "src" / "diffscale" / "fixtures"

TINY = {
    "n_clean": 3,
    "sequences": [[0, 0], [1, 1], [2, 2], [0, 1], [2, 0]],
    "weights": [0.35, 0.25, 0.2, 0.1, 0.1],
}


def main() -> None:
    (OUT / "tiny.json").write_text(json.dumps(TINY, indent=1) + "\n")
    surface = ChinchillaSurface(E=1.8, A=50.0, a=0.4, B=300.0, b=0.4)
    runs = chinchilla_runs(surface, log_spaced_family(30), method="method1", n_points=120)
    for r in runs:
        r.meta = {"generator": "chinchilla", "E": surface.E, "A": surface.A, "a": surface.a,
                  "B": surface.B, "b": surface.b, "flop_method": "method1"}
    dump_runs(runs, OUT / "synthetic_runs.jsonl")


if __name__ == "__main__":
    main()
