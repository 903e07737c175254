"""Dependency resolver for the outputs of an experiment matrix."""

import logging
import os.path

from .utils import read_fingerprint, write_fingerprint

logger = logging.getLogger(__name__)

FINGERPRINT_FILE = ".asd-hash"


class Resolver:
    """Dependency resolver for build targets."""

    def __init__(self, options):
        """Create a new resolver."""
        self.options = options
        self.ready_queue = []
        self.dependent = {}
        self.dependencies = {}

    def resolve(self, targets):
        """Create a sequence of targets to build in order to reach the passed-in targets."""
        targets = list(targets)
        while len(targets) > 0:
            target = targets.pop(0)
            tid = repr(target)
            if tid in self.dependencies:
                continue
            deps = target.dependencies()
            self.dependencies[tid] = len(deps)
            if deps:
                for dep in deps:
                    self.dependent.setdefault(repr(dep), []).append(target)
                    targets.append(dep)
            else:
                self.ready_queue.append(target)
        logger.debug("Ready: %s", self.ready_queue)
        logger.debug("Waiting: %s", self.dependencies)

    def execute(self):
        """Build all targets, return the ones that were (or would be) built."""
        executed = []
        while self.ready_queue:
            target = self.ready_queue.pop(0)
            tid = repr(target)

            if self.options.rebuild or not target.already_built():
                if self.options.dry_run:
                    print("Would execute: " + tid)
                else:
                    logger.info("Executing: %s", tid)
                    target.build()
                    target.mark_built()
                executed.append(target)
            else:
                logger.info("Skipping: %s", tid)

            del self.dependencies[tid]
            for dep in self.dependent.pop(tid, []):
                dep_tid = repr(dep)
                self.dependencies[dep_tid] -= 1
                if self.dependencies[dep_tid] == 0:
                    self.ready_queue.append(dep)
        return executed


class Target:
    """Base class for build targets.

    A target owning an ``out_dir`` stores its fingerprint there after a build and counts
    as built as long as the stored fingerprint matches the current one.
    """

    out_dir = None
    fingerprint_file = FINGERPRINT_FILE

    def __init__(self, runner):
        """Create a new target."""
        self.runner = runner
        self.options = self.runner.options

    def dependencies(self):
        """Get the dependencies of this target."""
        return []

    @property
    def fingerprint(self):
        """Identity of everything the output depends on."""
        return None

    def fingerprint_path(self):
        """Location of the stored fingerprint."""
        return os.path.join(self.out_dir, self.fingerprint_file)

    def already_built(self):
        """Check if the output exists and was built from the same inputs."""
        if self.out_dir is None or self.fingerprint is None:
            return False
        old = read_fingerprint(self.fingerprint_path())
        if old is not None and old != self.fingerprint:
            logger.info("Fingerprints of %r don't match: %s != %s", self, self.fingerprint, old)
        return old == self.fingerprint

    def mark_built(self):
        """Record the fingerprint of a finished build."""
        if self.out_dir is not None and self.fingerprint is not None:
            write_fingerprint(self.fingerprint_path(), self.fingerprint)

    def build(self):
        """Build the target."""

    def __repr__(self):
        """Generate a string representation of this target."""
        return self.__class__.__name__
