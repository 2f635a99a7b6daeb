import os
import tempfile

# Must run before database.py is imported anywhere.
_SCRATCH = tempfile.mkdtemp(prefix="collider-tests-")
os.environ.setdefault("COLLIDER_DATABASE_URL", f"sqlite:///{os.path.join(_SCRATCH, 'runs.db')}")
os.environ.setdefault("COLLIDER_RESULTS_DIR", os.path.join(_SCRATCH, "results"))
