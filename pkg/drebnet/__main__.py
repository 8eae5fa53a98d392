from drebnet.cli import main

raise SystemExit(main())
