"""Applications built on tickets: pseudonymous rating and push-content protection."""
