# Three attacks arriving one after another, driven by a config file, the same
# way `crt-lab train --config demos/configs/quick.toml` runs it.
import json
from pathlib import Path

from crtlab import parse_config, run_schedule

cfg = parse_config(Path(__file__).parent / "configs" / "quick.toml")
for t, ckpt, m in run_schedule(cfg):
    print(t, m.strategy, f"clean {m.clean_acc:.3f}", {k: round(v, 3) for k, v in m.attack_acc.items()})

print((cfg.out_dir / "metrics.csv").read_text())
for v in json.loads((cfg.out_dir / "metrics.json").read_text())["car"]:
    print(v)
