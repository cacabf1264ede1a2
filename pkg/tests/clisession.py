"""Scripted ``vlog`` sessions driven through ``main`` with injected rng/clock."""

import io
import json
import random
from pathlib import Path

from vaultlog.cli import main
from vaultlog.policy import Policy, and_of_groups, group

GROUPS = {
    "employer": ["emp1", "emp2", "emp3"],
    "union": ["uni1", "uni2", "uni3"],
    "authority": ["dpa1", "dpa2", "dpa3"],
}


def all_groups_policy() -> Policy:
    return Policy(and_of_groups(*(group(name, 2, members) for name, members in GROUPS.items())))


class Session:
    def __init__(self, workdir: Path, seed: int = 7, extra=()):
        self.work = Path(workdir)
        self.work.mkdir(parents=True, exist_ok=True)
        self.site = self.work / "site"
        self.shares = self.work / "shares"
        self.rng = random.Random(seed)
        self.now = 1_700_000_000
        self.extra = list(extra)

    def clock(self):
        return self.now

    def run(self, *argv, stdin=""):
        out, err = io.StringIO(), io.StringIO()
        code = main(
            ["--site", str(self.site), *argv],
            rng=self.rng, clock=self.clock, stdout=out, stderr=err, stdin=io.StringIO(stdin),
        )
        return code, out.getvalue(), err.getvalue()

    def ok(self, *argv, **kw):
        code, out, err = self.run(*argv, **kw)
        assert code == 0, (argv, code, err)
        return out

    def provision(self, devices=("door-01", "desk-02")):
        policy_file = self.work / "policy.json"
        policy_file.write_text(all_groups_policy().dumps())
        self.ok("init")
        self.ok("keygen", "--policy", str(policy_file), "--out", str(self.shares), *self.extra)
        for d in devices:
            self.ok("register-device", d)

    def log_events(self, n, user=lambda i: f"user-{i:03d}", devices=("door-01", "desk-02")):
        expected = []
        actions = ["login", "logout", "operation", "custom"]
        for i in range(n):
            self.now += 60
            ev = {
                "action": actions[i % 4],
                "detail": f"detail {i}",
                "device_id": devices[i % len(devices)],
                "occurred_at": self.now,
                "user_ref": user(i),
            }
            self.ok("log", "--device", ev["device_id"], "--user", ev["user_ref"],
                    "--action", ev["action"], "--detail", ev["detail"])
            expected.append(ev)
        return expected

    def ceremony(self, members):
        self.now += 60
        self.ok("ceremony", "open")
        for m in members:
            self.ok("ceremony", "submit", "--share", str(self.shares / f"{m}.share"))
        return self.run("ceremony", "finish")

    def decrypt(self, *argv):
        code, out, err = self.run("decrypt", "--operator", "auditor", *argv)
        return code, [json.loads(line) for line in out.splitlines() if line.strip()], err
