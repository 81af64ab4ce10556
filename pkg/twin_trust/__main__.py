import sys

from twin_trust.app.main import main

sys.exit(main())
