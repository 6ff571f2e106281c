"""Child-side task driver: ``python -m evotune._driver [--memory-bytes N]``.

Reads one JSON message ``{source, task_name, instance_path}`` from stdin and
writes one JSON message ``{status, per_instance_scores, detail}`` to the
original stdout. Anything the candidate prints goes to stderr.
"""

import argparse
import json
import math
import os
import resource
import sys
import traceback


def _run(msg: dict) -> dict:
    import numpy as np

    from evotune.tasks import InvalidOutputError, get_task, load_instance_set, run_rollouts

    spec = get_task(msg["task_name"])
    iset = load_instance_set(msg["instance_path"])
    namespace = {"__name__": "candidate", "np": np, "numpy": np, "math": math}
    try:
        exec(compile(msg["source"], "<candidate>", "exec"), namespace)
    except MemoryError:
        return {"status": "memory_exceeded", "detail": "MemoryError while loading program"}
    except BaseException:
        return {"status": "runtime_error", "detail": traceback.format_exc(limit=5)}
    fn = namespace.get(spec.function_name)
    if not callable(fn):
        return {"status": "runtime_error", "detail": f"program does not define {spec.function_name}()"}
    try:
        gaps = run_rollouts(iset.task, fn, iset.instances, iset.options)
    except InvalidOutputError as exc:
        return {"status": "invalid_output", "detail": str(exc)}
    except MemoryError:
        return {"status": "memory_exceeded", "detail": "MemoryError during rollout"}
    except BaseException:
        return {"status": "runtime_error", "detail": traceback.format_exc(limit=5)}
    gaps = [float(g) for g in gaps]
    if not all(math.isfinite(g) for g in gaps):
        return {"status": "invalid_output", "detail": "non-finite optimality gap"}
    return {"status": "ok", "per_instance_scores": gaps}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--memory-bytes", type=int, default=None)
    args = parser.parse_args(argv)

    result_fd = os.dup(1)
    os.dup2(2, 1)
    sys.stdout = sys.stderr

    if args.memory_bytes:
        resource.setrlimit(resource.RLIMIT_AS, (args.memory_bytes, args.memory_bytes))
    try:
        msg = json.loads(sys.stdin.read())
        result = _run(msg)
    except MemoryError:
        result = {"status": "memory_exceeded", "detail": "MemoryError in driver"}
    except Exception:
        result = {"status": "runtime_error", "detail": traceback.format_exc(limit=5)}
    with os.fdopen(result_fd, "w") as out:
        out.write(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
