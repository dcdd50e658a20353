from petc_lab.cli import main

raise SystemExit(main())
