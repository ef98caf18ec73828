"""Read-Answer-Check attention network."""
