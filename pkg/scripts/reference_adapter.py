#!/usr/bin/env python3
"""Reference external-environment adapter: a 3-step counter.

Speaks the stdio protocol: one JSON request per line on stdin
({"op": "reset"} or {"op": "step", "action": ...}), one JSON response per
line on stdout ({"text": ..., "reward": ..., "done": ...}). "inc" earns one
point; the episode ends at a count of 3, so max return is 3.
"""

import json
import sys


def main() -> None:
    count = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if request.get("op") == "reset":
            count = 0
            response = {"text": "counter ready at 0", "reward": 0.0, "done": False}
        elif request.get("op") == "step":
            if request.get("action") == "inc":
                count += 1
                response = {
                    "text": f"count is {count}",
                    "reward": 1.0,
                    "done": count >= 3,
                }
            else:
                response = {"text": "nothing happens", "reward": 0.0, "done": False}
        else:
            response = {"text": "unknown op", "reward": 0.0, "done": True}
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
