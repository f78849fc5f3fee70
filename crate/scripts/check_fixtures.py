#!/usr/bin/env python3
"""Schema check for dataset fixtures, independent of the Rust loader.

Usage: check_fixtures.py DATASET.json [DB.json]
"""
import json
import sys

TURN_FIELDS = {
    "turn_id": int, "user_utterance": str, "belief_state": list, "agent_acts": list,
    "agent_utterance": str, "spans": list,
}


def fail(where, msg):
    print(f"{where}: {msg}")
    return 1


def check(path, db_path=None):
    data = json.load(open(path, encoding="utf-8"))
    db = json.load(open(db_path, encoding="utf-8")) if db_path else None
    errors = 0
    if not isinstance(data, list):
        return fail(path, "top level must be an array")
    ids = set()
    for d in data:
        did = d.get("dialogue_id")
        if not isinstance(did, str) or did in ids:
            errors += fail(path, f"bad or duplicate dialogue_id {did!r}")
        ids.add(did)
        last = -1
        for t in d.get("turns", []):
            where = f"{did}/{t.get('turn_id')}"
            for f, ty in TURN_FIELDS.items():
                if not isinstance(t.get(f), ty):
                    errors += fail(where, f"field {f} missing or not {ty.__name__}")
            if t["turn_id"] <= last:
                errors += fail(where, "turn ids not increasing")
            last = t["turn_id"]
            keys = [(x["domain"], x["slot"], x["relation"]) for x in t["belief_state"]]
            if len(keys) != len(set(keys)):
                errors += fail(where, "duplicate slot key")
            if not t["agent_acts"]:
                errors += fail(where, "empty agent acts")
            for s in t["spans"]:
                utt = t["user_utterance"] if s["side"] == "user" else t["agent_utterance"]
                if not (0 <= s["start_char"] < s["end_char"] <= len(utt)):
                    errors += fail(where, f"span range {s['start_char']}..{s['end_char']}")
                elif utt[s["start_char"]:s["end_char"]] != s["value"]:
                    errors += fail(where, f"span text {utt[s['start_char']:s['end_char']]!r} != {s['value']!r}")
            call = t.get("api_call")
            if call is not None:
                if any(c["domain"] != call["domain"] for c in call["constraints"]):
                    errors += fail(where, "constraint outside the call domain")
                if db is not None:
                    want = [r for r in db[call["domain"]]
                            if all(r.get(c["slot"]) == c["value"] for c in call["constraints"])]
                    if want != t.get("api_results"):
                        errors += fail(where, "api_results differ from the database")
    return errors


if __name__ == "__main__":
    n = check(*sys.argv[1:3])
    print("ok" if n == 0 else f"{n} problems")
    sys.exit(1 if n else 0)
