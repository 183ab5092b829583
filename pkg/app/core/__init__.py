# Core settings, logging, errors, storage and parallel helpers
