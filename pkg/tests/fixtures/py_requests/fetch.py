import json
import requests

print(json.dumps(requests.__name__))
