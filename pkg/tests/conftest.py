import dataclasses
import json
import os
from pathlib import Path

import pytest

from normrl.harness import ABLATION_VARIANTS, RunConfig, ablate, run_batch, summarize_runs

REPO = Path(__file__).resolve().parents[1]

FULL_STEPS = 50_000
FULL_SEEDS = (0, 1, 2, 3, 4)
ABLATION_STEPS = 6_000
ABLATION_SEEDS = (0, 1)


def campaign_root() -> Path:
    return Path(os.environ.get("NORMRL_CAMPAIGN", REPO / "runs" / "acceptance"))


def _complete(run_dir: Path, steps: int) -> bool:
    summ = run_dir / "summary.json"
    if not summ.exists():
        return False
    data = json.loads(summ.read_text())
    return data.get("status") == "ok" and data.get("final_step") == steps


def ablation_base_cfg() -> RunConfig:
    return RunConfig(
        total_steps=ABLATION_STEPS,
        eval_interval=ABLATION_STEPS // 2,
        eval_episodes=20,
        checkpoint_interval=ABLATION_STEPS,
    )


def ensure_campaign(root: Path) -> dict:
    """Build any missing campaign runs; reuse completed ones.

    Layout: full/{base,cnsn}_seed{0..4} at 50k steps for criteria 5-6,
    ablation/ with the 5-variant matrix plus bn at a reduced budget for
    criteria 7 and 9.
    """
    full = root / "full"
    jobs = []
    for variant in ("base", "cnsn"):
        for seed in FULL_SEEDS:
            d = full / f"{variant}_seed{seed}"
            if not _complete(d, FULL_STEPS):
                jobs.append((RunConfig(variant=variant, seed=seed), d))
    if jobs:
        run_batch(jobs, workers=2, log=lambda m: print(f"[campaign] {m}", flush=True))

    abl_dir = root / "ablation"
    base = ablation_base_cfg()
    ablate(base, list(ABLATION_SEEDS), abl_dir, workers=2,
           log=lambda m: print(f"[campaign] {m}", flush=True))
    bn_jobs = []
    for seed in ABLATION_SEEDS:
        d = abl_dir / f"bn_seed{seed}"
        if not _complete(d, ABLATION_STEPS):
            bn_jobs.append((dataclasses.replace(base, variant="bn", seed=seed), d))
    if bn_jobs:
        run_batch(bn_jobs, workers=2, log=lambda m: print(f"[campaign] {m}", flush=True))

    all_variants = list(ABLATION_VARIANTS) + ["bn"]
    run_dirs = [abl_dir / f"{v}_seed{s}" for v in all_variants for s in ABLATION_SEEDS]
    table = summarize_runs(run_dirs, variants=all_variants)
    (abl_dir / "summary_with_bn.csv").write_text(table.to_csv_text())
    (abl_dir / "summary_with_bn.txt").write_text(table.to_text())
    return {"root": root, "full": full, "ablation": abl_dir}


@pytest.fixture(scope="session")
def campaign():
    root = campaign_root()
    return ensure_campaign(root)
