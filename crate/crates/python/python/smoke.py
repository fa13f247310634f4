"""Smoke test for the fieldsync extension module."""

import json
import pathlib
import sys

import fieldsync

SCENARIO = pathlib.Path(__file__).resolve().parents[2] / "server" / "scenarios" / "three_desks_lossy.json"


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    ops = fieldsync.diff("field report", "final report")
    check(fieldsync.apply_diff("field report", ops) == "final report", "diff round trip")
    check(fieldsync.edit_cost("abc", "abd") == 2, "edit cost")

    templates = json.loads(fieldsync.templates())
    check(templates[0]["template_id"] == "sitrep-au", "templates")
    body = fieldsync.render_template("sitrep-au")

    transcript = json.loads(fieldsync.simulate(SCENARIO.read_text(), seed=3))
    hashes = {a["sha256"] for a in transcript["actors"].values()}
    check(transcript["converged"] and hashes == {transcript["server"]["sha256"]}, "simulated desks converge")

    ws = fieldsync.Workspace()
    ws.register_user("u1", "Field One")
    doc = ws.create_document("sitrep-au")
    check(ws.text(doc) == body, "document from template")

    start = body.index("TBD")
    lock = ws.acquire_lock(doc, start, start + 3, "u1", "check roads")
    tasks = json.loads(ws.list_tasks("u1"))
    check([t["task_id"] for t in tasks] == [lock], "lock assigned as task")

    intruded = body[:start] + "XYZ" + body[start + 3:] + "\nDesk note"
    after = ws.desktop_edit(doc, "desk-1", intruded)
    check(after[start:start + 3] == "TBD" and after.endswith("Desk note"), "locked text reverted")

    ws.advance(60)
    ws.push("u1", lock, "Roads closed", "key-1")
    once = ws.text(doc)
    ws.push("u1", lock, "Roads closed", "key-1")
    check(ws.text(doc) == once and once.count("Roads closed") == 1, "idempotent push")

    try:
        ws.dismiss_lock(lock, "someone-else")
    except fieldsync.FieldsyncError as e:
        check(True, f"foreign dismiss refused ({str(e).split(':')[0]})")
    else:
        sys.exit("FAIL foreign dismiss was accepted")
    print("smoke passed")


if __name__ == "__main__":
    main()
