#!/usr/bin/env python3
"""Writes the JSON fixtures under crates/core/tests/fixtures.

API results are computed by exact-match filtering of the database, and spans
by locating each annotation value in its utterance, so the suite dataset is
consistent by construction.
"""
import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT = ROOT / "crates" / "core" / "tests" / "fixtures"

EQ = "equal_to"


def trip(d, s, v):
    return {"domain": d, "slot": s, "relation": EQ, "value": v}


def act(d, a, s=None, v=None):
    return {
        "domain": d,
        "act": a,
        "slot": s,
        "relation": EQ if v is not None else None,
        "value": v,
    }


def rec(**kw):
    return {k: v for k, v in sorted(kw.items())}


# -- suite database ----------------------------------------------------------

DB = {
    "attraction": [
        rec(name="Guanqian Street", area="Gusu District", type="commercial center", consumption="moderate",
            ticket_price="free", opening_hours="all day", score="4.3"),
        rec(name="Shantang Street", area="Gusu District", type="commercial center", consumption="cheap",
            ticket_price="free", opening_hours="all day", score="4.5"),
        rec(name="Lion Grove Garden", area="Gusu District", type="garden", consumption="moderate",
            ticket_price="30 yuan", opening_hours="7:30-17:30", score="4.6"),
        rec(name="Suzhou Museum", area="Gusu District", type="museum", consumption="cheap",
            ticket_price="free", opening_hours="9:00-17:00", score="4.8"),
    ],
    "hotel": [
        rec(name="Pingjiang Lodge", area="Gusu District", pricerange="expensive", stars="5",
            hotel_type="boutique", parking="yes"),
        rec(name="Jinjiang Inn", area="Gusu District", pricerange="cheap", stars="3",
            hotel_type="business", parking="no"),
        rec(name="Marriott Suzhou", area="Industrial Park", pricerange="expensive", stars="5",
            hotel_type="business", parking="yes"),
        rec(name="Hanting Express", area="Industrial Park", pricerange="cheap", stars="2",
            hotel_type="business", parking="yes"),
        rec(name="Garden Hotel", area="Gusu District", pricerange="moderate", stars="4",
            hotel_type="resort", parking="yes"),
    ],
    "restaurant": [
        rec(name="Songhelou", area="Gusu District", food="Suzhou cuisine", pricerange="expensive", phone="0512-6727"),
        rec(name="Deyuelou", area="Gusu District", food="Suzhou cuisine", pricerange="moderate", phone="0512-6523"),
        rec(name="Zhu Hongxing", area="Gusu District", food="noodles", pricerange="cheap", phone="0512-6581"),
        rec(name="Din Tai Fung", area="Industrial Park", food="Taiwanese", pricerange="moderate", phone="0512-6295"),
    ],
}


def ontology_from(db):
    out = {}
    for dom, rows in db.items():
        slots = {}
        for r in rows:
            for k, v in r.items():
                slots.setdefault(k, [])
                if v not in slots[k]:
                    slots[k].append(v)
        out[dom] = dict(sorted(slots.items()))
    return out


def query(db, domain, constraints):
    return [r for r in db[domain] if all(r.get(c["slot"]) == c["value"] for c in constraints)]


def find_span(utt, value, side, d, s):
    i = utt.find(value)
    assert i >= 0, f"{value!r} not in {utt!r}"
    return {"domain": d, "slot": s, "relation": EQ, "value": value, "start_char": i,
            "end_char": i + len(value), "side": side}


def key(t):
    return (t["domain"], t["slot"], t["relation"])


def build_dialogue(did, turns, db):
    """turns: list of dicts with user, state (cumulative triplets), call (bool), acts, agent."""
    out = []
    prev_state = []
    prev_acts = []
    for tid, t in enumerate(turns):
        state = t["state"]
        prev = {key(x): x["value"] for x in prev_state}
        delta = [x for x in state if prev.get(key(x)) != x["value"]]
        spans = []
        for x in delta:
            offered = any(a["domain"] == x["domain"] and a["slot"] == x["slot"] and a["value"] == x["value"]
                          for a in prev_acts)
            if not offered:
                spans.append(find_span(t["user"], x["value"], "user", x["domain"], x["slot"]))
        seen = set()
        for a in t["acts"]:
            if a["value"] is not None and (a["domain"], a["slot"], a["value"]) not in seen:
                seen.add((a["domain"], a["slot"], a["value"]))
                spans.append(find_span(t["agent"], a["value"], "agent", a["domain"], a["slot"]))
        api_call = api_results = None
        if t.get("call"):
            domain = delta[-1]["domain"] if delta else t["call_domain"]
            constraints = [x for x in state if x["domain"] == domain]
            api_call = {"domain": domain, "constraints": constraints}
            api_results = query(db, domain, constraints)
            assert api_results, f"{did}/{tid}: empty results"
        out.append({
            "turn_id": tid,
            "user_utterance": t["user"],
            "belief_state": state,
            "api_call": api_call,
            "api_results": api_results,
            "agent_acts": t["acts"],
            "agent_utterance": t["agent"],
            "spans": spans,
        })
        prev_state, prev_acts = state, t["acts"]
    domains = []
    for t in out:
        for x in t["belief_state"]:
            if x["domain"] not in domains:
                domains.append(x["domain"])
    return {"dialogue_id": did, "domains": domains, "turns": out}


def suite():
    A, H, R = "attraction", "hotel", "restaurant"
    d1s0 = [trip(A, "type", "commercial center"), trip(A, "consumption", "moderate")]
    d1s1 = d1s0 + [trip(A, "name", "Guanqian Street")]
    d1 = [
        dict(user="Hi, I want to visit a commercial center that is moderate in price.", state=d1s0, call=True,
             acts=[act(A, "recommend", "name", "Guanqian Street")], agent="You can go to Guanqian Street."),
        dict(user="Sounds good. When is Guanqian Street open?", state=d1s1, call=True,
             acts=[act(A, "inform", "opening_hours", "all day")], agent="It is open all day."),
        dict(user="Is there a ticket fee?", state=d1s1,
             acts=[act(A, "inform", "ticket_price", "free")], agent="No, the entry is free."),
        dict(user="Great, thank you!", state=d1s1,
             acts=[act("general", "bye")], agent="You're welcome, enjoy your trip!"),
    ]
    d2s0 = [trip(H, "pricerange", "cheap"), trip(H, "area", "Industrial Park")]
    d2s2 = [trip(H, "pricerange", "cheap"), trip(H, "area", "Gusu District"), trip(H, "stars", "3"),
            trip(H, "hotel_type", "business")]
    d2 = [
        dict(user="I need a cheap hotel in the Industrial Park.", state=d2s0, call=True,
             acts=[act(H, "inform", "name", "Hanting Express"), act(H, "inform", "stars", "2")],
             agent="Hanting Express is a 2 star hotel there."),
        dict(user="Does it have parking?", state=d2s0,
             acts=[act(H, "inform", "parking", "yes")], agent="It has parking, yes."),
        dict(user="Actually I would prefer a business hotel with 3 stars in Gusu District.", state=d2s2, call=True,
             acts=[act(H, "recommend", "name", "Jinjiang Inn")], agent="I recommend Jinjiang Inn."),
        dict(user="OK, book Jinjiang Inn please.", state=d2s2 + [trip(H, "name", "Jinjiang Inn")],
             acts=[act(H, "confirm", "name", "Jinjiang Inn")], agent="Jinjiang Inn is booked for you."),
    ]
    d3s0 = [trip(R, "food", "noodles")]
    d3s2 = [trip(R, "food", "Suzhou cuisine"), trip(R, "pricerange", "moderate")]
    d3 = [
        dict(user="Can you find me a restaurant that serves noodles?", state=d3s0, call=True,
             acts=[act(R, "recommend", "name", "Zhu Hongxing"), act(R, "inform", "pricerange", "cheap")],
             agent="Zhu Hongxing is a cheap option."),
        dict(user="What is their phone number?", state=d3s0,
             acts=[act(R, "inform", "phone", "0512-6581")], agent="Their number is 0512-6581."),
        dict(user="I'd rather have Suzhou cuisine at a moderate price.", state=d3s2, call=True,
             acts=[act(R, "recommend", "name", "Deyuelou")], agent="Deyuelou would suit you."),
        dict(user="Thanks, that's all.", state=d3s2, acts=[act("general", "bye")], agent="Goodbye!"),
    ]
    d4s0 = [trip(A, "type", "garden"), trip(A, "area", "Gusu District")]
    d4s1 = d4s0 + [trip(R, "pricerange", "cheap")]
    d4 = [
        dict(user="I want to see a garden in Gusu District.", state=d4s0, call=True,
             acts=[act(A, "recommend", "name", "Lion Grove Garden"), act(A, "inform", "ticket_price", "30 yuan")],
             agent="Lion Grove Garden is nice, tickets cost 30 yuan."),
        dict(user="Also, I need a cheap restaurant nearby.", state=d4s1, call=True,
             acts=[act(R, "recommend", "name", "Zhu Hongxing")], agent="Try Zhu Hongxing."),
        dict(user="What are the opening hours of the garden?", state=d4s1,
             acts=[act(A, "inform", "opening_hours", "7:30-17:30")], agent="The garden is open 7:30-17:30."),
        dict(user="And the restaurant's phone?", state=d4s1,
             acts=[act(R, "inform", "phone", "0512-6581")], agent="You can call 0512-6581."),
    ]
    d5s0 = [trip(H, "stars", "5")]
    d5s1 = d5s0 + [trip(H, "area", "Industrial Park")]
    d5 = [
        dict(user="I am looking for a 5 star hotel.", state=d5s0, call=True,
             acts=[act(H, "request", "area")], agent="There are two. Which area do you prefer?"),
        dict(user="The Industrial Park, please.", state=d5s1, call=True,
             acts=[act(H, "recommend", "name", "Marriott Suzhou"), act(H, "inform", "pricerange", "expensive")],
             agent="Marriott Suzhou is available, though it is expensive."),
        dict(user="Is there parking at the hotel?", state=d5s1,
             acts=[act(H, "inform", "parking", "yes")], agent="There is parking there, yes."),
        dict(user="Great, I'll take Marriott Suzhou.", state=d5s1 + [trip(H, "name", "Marriott Suzhou")], call=True,
             acts=[act(H, "confirm", "name", "Marriott Suzhou")], agent="Marriott Suzhou is booked."),
    ]
    return [build_dialogue(f"suite-{i + 1}", d, DB) for i, d in enumerate([d1, d2, d3, d4, d5])]


# -- sample dialogue -------------------------------------------------------

GUANQIAN = rec(address="Guanqian Street, Gusu District, Suzhou City.", area="Gusu District", consumption="moderate",
               metro_station="true", name="Guanqian Street", opening_hours="all day", phone_number="N/A",
               score="4.3", the_most_suitable_people="friends", ticket_price="free", type="commercial center")
GUANQIAN_FULL = dict(GUANQIAN, features="You can try food from time-honored Suzhou brands, such as Songhelou "
                     "Restaurant, Huang Tianyuan, and visit Xuanmiao Temple, the place that gave the street its name.")
GUANQIAN_FULL = rec(**GUANQIAN_FULL)


def other_center(name, addr, score):
    return rec(address=addr, area="Gusu District", consumption="moderate", metro_station="true", name=name,
               opening_hours="all day", phone_number="N/A", score=score, the_most_suitable_people="friends",
               ticket_price="free", type="commercial center")


def sample():
    A = "attraction"
    u1 = ("Hi, my friend is coming to Suzhou to visit me, I want to take him to a commercial center in the "
          "mid-price range. Do you have anything to recommend?")
    a1 = "You can go to Guanqian Street."
    u2 = "Oh yeah, why didn't I think of that? When is it open?"
    a2 = "It's open all day."
    s1 = [trip(A, "consumption", "mid"), trip(A, "type", "commercial center")]
    s2 = [trip(A, "consumption", "mid"), trip(A, "name", "Guanqian Street"),
          trip(A, "the_most_suitable_people", "friend"), trip(A, "type", "commercial center")]
    results1 = [
        GUANQIAN,
        other_center("Shantang Street", "Shantang Street, Gusu District, Suzhou City.", "4.5"),
        other_center("Shiquan Street", "Shiquan Street, Gusu District, Suzhou City.", "4.2"),
        other_center("Pingjiang Road", "Pingjiang Road, Gusu District, Suzhou City.", "4.6"),
    ]
    t1 = {
        "turn_id": 0, "user_utterance": u1, "belief_state": s1,
        "api_call": {"domain": A, "constraints": s1}, "api_results": results1,
        "agent_acts": [act(A, "recommend", "name", "Guanqian Street")], "agent_utterance": a1,
        "spans": [find_span(u1, "mid", "user", A, "consumption"),
                  find_span(u1, "commercial center", "user", A, "type"),
                  find_span(a1, "Guanqian Street", "agent", A, "name")],
    }
    t2 = {
        "turn_id": 1, "user_utterance": u2, "belief_state": s2,
        "api_call": {"domain": A, "constraints": s2}, "api_results": [GUANQIAN_FULL],
        "agent_acts": [act(A, "inform", "opening_hours", "all day")], "agent_utterance": a2,
        "spans": [find_span(a2, "all day", "agent", A, "opening_hours")],
    }
    return [{"dialogue_id": "sample", "domains": [A], "turns": [t1, t2]}]


def value_mapping():
    return {
        "中等": {
            "attraction.consumption": {"candidates": ["moderate", "mid"], "canonical": "moderate"},
            "hotel.pricerange": {"candidates": ["moderate"], "canonical": "moderate"},
            "restaurant.pricerange": {"candidates": ["moderate"], "canonical": "moderate"},
        },
        "便宜": {
            "hotel.pricerange": {"candidates": ["cheap"], "canonical": "cheap"},
            "restaurant.pricerange": {"candidates": ["cheap", "inexpensive"], "canonical": "cheap"},
        },
        "观前街": {
            "attraction.name": {"candidates": ["Guanqian Street", "Guanqian Road"], "canonical": "Guanqian Street"},
        },
    }


def dump(name, obj):
    (OUT / name).write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    dump("suite.json", suite())
    dump("suite_db.json", DB)
    dump("suite_ontology.json", ontology_from(DB))
    dump("suite_vm.json", value_mapping())
    dump("sample.json", sample())


if __name__ == "__main__":
    main()
