"""Power curves over effect size and sample size; smallest N reaching 80% power.

Run from the repository root:  python3 demos/03_power_curves.py
"""
import tempfile
from pathlib import Path

from mvpower.power import PowerSettings, power_curve
from mvpower.synthetic import benchmark

b = benchmark()
grid = [(rho, N) for rho in (1.2, 1.5, 1.8) for N in (15, 30, 60, 90, 150)]
table = power_curve(b.model, grid, "Site.Type",
                    PowerSettings(30, n_power=300, n_resamp=300, seed=3),
                    b.increasers, b.decreasers)
print(table[["rho", "N", "power", "mc_se", "crit_value", "seconds"]].round(3).to_string(index=False))

wide = table.pivot(index="N", columns="rho", values="power")
print(wide.round(2))

for rho, col in wide.items():
    enough = col[col >= 0.8]
    print(f"rho={rho}: N for 80% power", enough.index.min() if len(enough) else "> 150")

path = Path(tempfile.gettempdir()) / "power_curve.csv"
table.to_csv(path, index=False)
print("saved", path)
