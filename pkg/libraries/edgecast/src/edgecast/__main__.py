import sys

import edgecast

sys.exit(edgecast.main())
