# Pydantic schemas for run configuration, reports and API requests
