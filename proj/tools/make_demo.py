"""Regenerates data/demo: a synthetic survey over sex x age x educ."""
import json
import pathlib

import numpy as np

out = pathlib.Path(__file__).resolve().parent.parent / "data" / "demo"
out.mkdir(parents=True, exist_ok=True)
levels = {"sex": ["m", "f"], "age": ["18-29", "30-44", "45-64", "65+"], "educ": ["hs", "college", "grad"]}
rng = np.random.default_rng(20161108)
N = 3000
sex = rng.choice(2, N, p=[0.48, 0.52])
age = rng.choice(4, N, p=[0.2, 0.27, 0.33, 0.2])
educ = rng.choice(3, N, p=[0.45, 0.38, 0.17])
z = -1.6 + 0.3 * sex + 0.25 * age + 0.5 * educ + 0.6 * (sex == 1) * (educ == 2) - 0.5 * (age == 0) * (educ == 0)
respondent = rng.random(N) < 1 / (1 + np.exp(-z))
p_y = 1 / (1 + np.exp(-(-0.4 + 0.5 * sex - 0.2 * age + 0.4 * educ - 0.8 * (sex == 1) * (educ == 2))))
y = (rng.random(N) < p_y).astype(int)

names = list(levels)
(out / "schema.json").write_text(
    json.dumps({"covariates": [{"name": k, "levels": v} for k, v in levels.items()]}, indent=2) + "\n")
with open(out / "microdata.csv", "w") as f:
    f.write("sex,age,educ,respondent,outcome\n")
    for i in range(N):
        r = int(respondent[i])
        f.write(f"{levels['sex'][sex[i]]},{levels['age'][age[i]]},{levels['educ'][educ[i]]},{r},{y[i] if r else ''}\n")
counts = {}
for i in range(N):
    key = (sex[i], age[i], educ[i])
    counts[key] = counts.get(key, 0) + 1
with open(out / "pop_counts.csv", "w") as f:
    f.write("sex,age,educ,count\n")
    for key in sorted(counts):
        f.write(f"{levels['sex'][key[0]]},{levels['age'][key[1]]},{levels['educ'][key[2]]},{counts[key]}\n")
