"""Record the committed "missile" planner fixture.

Serves hand-authored stage replies from a local stub endpoint, runs the live
planning chain against it and writes the digest-named response files. Rerun
after editing a template, since template bytes feed the digests.

    python scripts/record_missile_fixture.py [out_dir]
"""

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

from morph4d.planner import PlannerConfig, record_fixture, request_plan

PROMPT = "The missile collided with the plane and exploded."

REPLIES = {
    "Decomposing": "- a gray cruise missile\n- a white passenger plane\n- an orange fireball explosion cloud",
    "Expansion": (
        "The missile starts at [-1.0, 0.2, 0] and flies along +x at [0.15, 0, 0] per frame until 0.5.\n"
        "The plane starts at [0.6, 0.2, 0] and flies along -x at [-0.05, 0, 0] per frame; after the\n"
        "impact at 0.5 it drops at [-0.05, -0.04, 0] per frame and rolls by [0, 0, -2] degrees per\n"
        "frame between 0.5 and 1. Between 0.45 and 0.6 the missile turns into the explosion cloud,\n"
        "which stays at [0.2, 0.2, 0]."
    ),
    "production": "```json\n" + json.dumps({"sample": {
        "obj_prompt": ["a gray cruise missile", "a white passenger plane", "an orange fireball explosion cloud"],
        "TrajParams": {
            "init_pos": [[-1.0, 0.2, 0.0], [0.6, 0.2, 0.0], [0.2, 0.2, 0.0]],
            "move_list": [[[0.15, 0.0, 0.0], [0.0, 0.0, 0.0]],
                          [[-0.05, 0.0, 0.0], [-0.05, -0.04, 0.0]],
                          [[0.0, 0.0, 0.0]]],
            "move_time": [[0.5], [0.5], []],
            "init_angle": [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
            "rotations": [[], [[0, 0, -2]], []],
            "rotations_time": [[], [[0.5, 1.0]], []],
            "trans_list": [[0, 2]],
            "trans_period": [[0.45, 0.6]],
        }}}, indent=2) + "\n```\n",
}


class Stub(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        system = body["messages"][0]["content"].splitlines()[0]
        reply = next(v for k, v in REPLIES.items() if k in system)
        data = json.dumps({"choices": [{"message": {"role": "assistant", "content": reply}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "tests/fixtures/planner/missile"
    for old in out.glob("*.response"):
        old.unlink()
    server = HTTPServer(("127.0.0.1", 0), Stub)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    cfg = PlannerConfig(endpoint=f"http://127.0.0.1:{server.server_port}/v1/chat", model="stub")
    files = record_fixture(cfg, PROMPT, out)
    server.shutdown()
    doc = request_plan(PlannerConfig(replay_dir=str(out)), PROMPT)
    print(f"wrote {len(files)} responses to {out}; replay gives {len(doc.obj_prompt)} objects")


if __name__ == "__main__":
    main()
