# Settings and logging
